//! PNG I/O, gray-world white balance and full-reference quality metrics.

use std::path::Path;

use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Loads an 8-bit PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::input(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Writes a `[3, H, W]` (or `[1, H, W]`) tensor as an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    ensure!(
        c == 3 || c == 1,
        Error::Shape(format!("cannot save a {c}-channel image"))
    );
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| q(img.at3(if c == 1 { 0 } else { ch }, y as usize, x as usize));
        image::Rgb([at(0), at(1), at(2)])
    });
    buf.save(path)?;
    Ok(())
}

/// Red and blue gains `mean(G) / mean(R)` and `mean(G) / mean(B)`.
pub fn grayworld_gains(img: &Tensor) -> Result<(f64, f64)> {
    let (c, _, _) = img.dims3()?;
    ensure!(c == 3, Error::Shape(format!("white balance needs 3 channels, got {c}")));
    let m = img.channel_means();
    for (name, v) in [("red", m[0]), ("blue", m[2])] {
        ensure!(
            v > 0.0,
            Error::InvalidArgument(format!(
                "{name} channel mean is {v}; gray-world gains are undefined"
            ))
        );
    }
    Ok((m[1] / m[0], m[1] / m[2]))
}

/// Gray-world balance with green as reference, without the final clamp.
pub fn white_balance_unclamped(img: &Tensor) -> Result<Tensor> {
    let (gr, gb) = grayworld_gains(img)?;
    let (_, h, w) = img.dims3()?;
    let plane = h * w;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        match i / plane {
            0 => *v *= gr,
            2 => *v *= gb,
            _ => {}
        }
    }
    Ok(out)
}

pub fn white_balance_grayworld_green(img: &Tensor) -> Result<Tensor> {
    Ok(white_balance_unclamped(img)?.clamp(0.0, 1.0))
}

pub fn mse(f: &Tensor, y: &Tensor) -> Result<f64> {
    f.check_same_shape(y)?;
    ensure!(!f.is_empty(), Error::Shape("empty images".into()));
    Ok(f.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / f.len() as f64)
}

/// `10 log10(1 / MSE)` for peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(f: &Tensor, y: &Tensor) -> Result<f64> {
    let e = mse(f, y)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB))
}

/// Channel mean of a `[C, H, W]` image as an `H x W` plane.
fn luminance(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = img.dims3()?;
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(img.channel(ch)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Ok((out, h, w))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xx in 0..ow {
            rows[y * ow + xx] = (0..n).map(|i| k[i] * x[y * w + xx + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (0..n).map(|i| k[i] * rows[(y + i) * ow + xx]).sum();
        }
    }
    out
}

/// Mean SSIM of the luminance planes, 11x11 Gaussian window (sigma 1.5),
/// valid positions only.
pub fn ssim(f: &Tensor, y: &Tensor) -> Result<f64> {
    f.check_same_shape(y)?;
    let (a, h, w) = luminance(f)?;
    let (b, _, _) = luminance(y)?;
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"))
    );
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let saa = filter_valid(&prod(&a, &a), h, w, &k);
    let sbb = filter_valid(&prod(&b, &b), h, w, &k);
    let sab = filter_valid(&prod(&a, &b), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image metrics plus the items that could not be evaluated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<(String, String)>,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    /// One row per image, failed items with NaN metrics, then a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "psnr_db", "ssim"])?;
        for r in &self.rows {
            w.write_record([r.name.clone(), r.psnr_db.to_string(), r.ssim.to_string()])?;
        }
        for (name, _) in &self.failures {
            w.write_record([name.as_str(), "NaN", "NaN"])?;
        }
        w.write_record([
            "mean".to_string(),
            self.mean_psnr().to_string(),
            self.mean_ssim().to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rnd(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |i| 0.5 + 0.45 * ((i as f64 * 0.71 + seed) * 5.3).sin())
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = rnd(&[3, 5, 7], 0.0).map(|v| (v * 255.0).round() / 255.0);
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
        let missing = load_png(&dir.path().join("nope.png")).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
    }

    #[test]
    fn gray_image_is_unchanged() {
        let img = Tensor::full([3, 4, 4], 0.4);
        assert_eq!(white_balance_grayworld_green(&img).unwrap(), img);
    }

    #[test]
    fn closed_form_gains() {
        let g = rnd(&[1, 6, 6], 1.0).scale(0.4);
        let mut data = g.data().iter().map(|v| 2.0 * v).collect::<Vec<_>>();
        data.extend_from_slice(g.data());
        data.extend(g.data().iter().map(|v| 0.5 * v));
        let img = Tensor::new([3, 6, 6], data).unwrap();
        let (gr, gb) = grayworld_gains(&img).unwrap();
        assert!((gr - 0.5).abs() < 1e-12 && (gb - 2.0).abs() < 1e-12);
        let m = white_balance_unclamped(&img).unwrap().channel_means();
        assert!((m[0] - m[1]).abs() < 1e-12 && (m[2] - m[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_red_mean_is_rejected() {
        let mut img = rnd(&[3, 4, 4], 0.0);
        img.data_mut()[..16].fill(0.0);
        assert!(white_balance_grayworld_green(&img).is_err());
    }

    #[test]
    fn psnr_values() {
        let y = Tensor::full([3, 4, 4], 0.5);
        assert_eq!(psnr(&y, &y).unwrap(), PSNR_CAP_DB);
        let f = y.map(|v| v + 0.1);
        assert!((psnr(&f, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&f, &y).unwrap(), psnr(&y, &f).unwrap());
        assert!(psnr(&f, &Tensor::zeros([3, 4, 5])).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let y = rnd(&[3, 16, 16], 0.0);
        assert!((ssim(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&rnd(&[3, 8, 8], 0.0), &rnd(&[3, 8, 8], 0.0)).is_err());
    }

    #[test]
    fn metrics_csv_has_summary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let report = MetricsReport {
            rows: vec![
                MetricsRow { name: "a".into(), psnr_db: 20.0, ssim: 0.5 },
                MetricsRow { name: "b".into(), psnr_db: 30.0, ssim: 0.7 },
            ],
            ..Default::default()
        };
        report.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.ends_with("mean,25,0.6\n"), "{text}");
    }
}
