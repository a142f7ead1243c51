//! 2-D discrete Fourier transforms and Gaussian high-pass filtering.
//!
//! The forward transform is the plain (unnormalised) DFT; the inverse carries
//! the `1 / (H W)` factor. Public spectra are centre-shifted so that the DC
//! term sits at `(H / 2, W / 2)` (integer division), matching `fftshift`.
//!
//! The differentiable ops keep spectra unshifted internally and evaluate the
//! centred mask through the shift permutation, which is the same arithmetic
//! as shift, multiply, inverse shift.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::autograd::Var;
use crate::error::{ensure, Error, Result};
use crate::par;
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place unnormalised 2-D FFT of one row-major `h x w` plane.
fn fft2_plane(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let (row, col) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        if w > 1 {
            row.process(buf);
        }
        if h > 1 {
            let mut t = vec![Complex64::default(); h * w];
            for y in 0..h {
                for x in 0..w {
                    t[x * h + y] = buf[y * w + x];
                }
            }
            col.process(&mut t);
            for x in 0..w {
                for y in 0..h {
                    buf[y * w + x] = t[x * h + y];
                }
            }
        }
    });
}

/// Per-channel unnormalised FFT of a real `[C, H, W]` buffer.
fn fft_real_channels(x: &[f64], c: usize, h: usize, w: usize) -> Vec<Complex64> {
    let plane = h * w;
    let mut out: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    debug_assert_eq!(out.len(), c * plane);
    par::for_each_chunk(&mut out, plane, |_, p| fft2_plane(p, h, w, false));
    out
}

/// Position of unshifted frequency index `k` after a centre shift of an `n`-long axis.
fn shifted(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

/// A complex `[C, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl ComplexTensor {
    pub fn at(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[(c * self.height + u) * self.width + v]
    }

    pub fn real(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|z| z.re).collect(),
        )
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.data.iter().fold(0.0, |m, z| m.max(z.im.abs()))
    }

    fn permute_planes(&self, map: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let (h, w) = (self.height, self.width);
        let mut data = vec![Complex64::default(); self.data.len()];
        for c in 0..self.channels {
            for u in 0..h {
                for v in 0..w {
                    let (su, sv) = map(u, v);
                    data[(c * h + su) * w + sv] = self.data[(c * h + u) * w + v];
                }
            }
        }
        Self {
            data,
            ..self.clone()
        }
    }
}

/// Forward 2-D DFT of every channel followed by a centre shift.
pub fn dft2(x: &Tensor) -> Result<ComplexTensor> {
    let (c, h, w) = x.dims3()?;
    let raw = ComplexTensor {
        channels: c,
        height: h,
        width: w,
        data: fft_real_channels(x.data(), c, h, w),
    };
    Ok(raw.permute_planes(|u, v| (shifted(u, h), shifted(v, w))))
}

/// Inverse of [`dft2`]: undo the centre shift, then the inverse DFT with `1 / (H W)`.
pub fn idft2(spec: &ComplexTensor) -> ComplexTensor {
    let (h, w) = (spec.height, spec.width);
    // `shifted` maps raw -> centred, so gather through it to undo the shift.
    let mut raw = spec.clone();
    for c in 0..spec.channels {
        for u in 0..h {
            for v in 0..w {
                raw.data[(c * h + u) * w + v] = spec.at(c, shifted(u, h), shifted(v, w));
            }
        }
    }
    let norm = 1.0 / (h * w) as f64;
    par::for_each_chunk(&mut raw.data, h * w, |_, p| {
        fft2_plane(p, h, w, true);
        p.iter_mut().for_each(|z| *z *= norm);
    });
    raw
}

/// A centred Gaussian high-pass mask `1 - exp(-d^2 / (2 sigma^2))`.
#[derive(Clone, Debug)]
pub struct FrequencyMask {
    /// `[H, W]`, indexed in centred coordinates.
    pub mask: Tensor,
    pub center: (usize, usize),
    pub sigma: f64,
}

impl FrequencyMask {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.mask.data()[u * self.mask.shape()[1] + v]
    }
}

pub fn gaussian_highpass_mask(h: usize, w: usize, sigma: f64) -> Result<FrequencyMask> {
    ensure!(
        h >= 1 && w >= 1,
        Error::InvalidArgument(format!("mask size must be positive, got {h}x{w}"))
    );
    ensure!(
        sigma > 0.0 && sigma.is_finite(),
        Error::InvalidArgument(format!("sigma must be positive, got {sigma}"))
    );
    let (uc, vc) = (h / 2, w / 2);
    let mask = Tensor::from_fn([h, w], |i| {
        let du = (i / w) as f64 - uc as f64;
        let dv = (i % w) as f64 - vc as f64;
        1.0 - (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp()
    });
    Ok(FrequencyMask {
        mask,
        center: (uc, vc),
        sigma,
    })
}

/// Squared distance from the centre for every unshifted frequency index.
fn unshifted_dist2(h: usize, w: usize) -> Vec<f64> {
    let (uc, vc) = (h / 2, w / 2);
    (0..h * w)
        .map(|i| {
            let du = shifted(i / w, h) as f64 - uc as f64;
            let dv = shifted(i % w, w) as f64 - vc as f64;
            du * du + dv * dv
        })
        .collect()
}

impl<'g> Var<'g> {
    /// Unshifted DFT of every channel of a real `[C, H, W]` tensor, returned as
    /// `[C, H, W, 2]` holding (re, im) pairs.
    pub fn spectrum(self) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("spectrum expects [C, H, W]");
        let spec = fft_real_channels(x.data(), c, h, w);
        let flat: Vec<f64> = spec.iter().flat_map(|z| [z.re, z.im]).collect();
        self.graph().record(
            Tensor::from_parts(vec![c, h, w, 2], flat),
            &[self],
            Box::new(move |g| {
                // d/dx of <G, F x> is Re(conj-adjoint F^H G) = Re(unnormalised inverse of G).
                let mut buf: Vec<Complex64> = g
                    .data()
                    .chunks(2)
                    .map(|p| Complex64::new(p[0], p[1]))
                    .collect();
                par::for_each_chunk(&mut buf, h * w, |_, p| fft2_plane(p, h, w, true));
                let gx = buf.iter().map(|z| z.re).collect();
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }

    /// Applies the centred Gaussian high-pass mask with bandwidth `sigma` (a
    /// one-element var) to an unshifted `[C, H, W, 2]` spectrum and returns the
    /// real part of the inverse DFT.
    pub fn highpass_from_spectrum(self, sigma: Var<'g>) -> Var<'g> {
        self.same_graph(&sigma);
        let spec = self.value();
        let &[c, h, w, 2] = spec.shape() else {
            panic!("highpass_from_spectrum expects [C, H, W, 2], got {:?}", spec.shape())
        };
        let s = sigma.value().item();
        assert!(!(s <= 0.0), "high-pass sigma must be positive, got {s}");
        let plane = h * w;
        let d2 = unshifted_dist2(h, w);
        let mask: Vec<f64> = d2.iter().map(|d| 1.0 - (-d / (2.0 * s * s)).exp()).collect();
        let norm = 1.0 / plane as f64;
        let mut buf: Vec<Complex64> = spec
            .data()
            .chunks(2)
            .enumerate()
            .map(|(i, p)| Complex64::new(p[0], p[1]) * mask[i % plane])
            .collect();
        par::for_each_chunk(&mut buf, plane, |_, p| fft2_plane(p, h, w, true));
        let y = buf.iter().map(|z| z.re * norm).collect();
        let sigma_shape = sigma.value().shape().to_vec();
        self.graph().record(
            Tensor::from_parts(vec![c, h, w], y),
            &[self, sigma],
            Box::new(move |g| {
                let gspec = fft_real_channels(g.data(), c, h, w);
                let mut gs = 0.0;
                let mut gx = Vec::with_capacity(2 * gspec.len());
                for (i, gk) in gspec.iter().enumerate() {
                    let k = i % plane;
                    let m = mask[k];
                    gx.push(gk.re * m * norm);
                    gx.push(gk.im * m * norm);
                    let e = (-d2[k] / (2.0 * s * s)).exp();
                    let dm = -e * d2[k] / (s * s * s);
                    let xk = Complex64::new(spec.data()[2 * i], spec.data()[2 * i + 1]);
                    gs += dm * (xk * gk.conj()).re;
                }
                vec![
                    Some(Tensor::from_parts(vec![c, h, w, 2], gx)),
                    Some(Tensor::from_parts(sigma_shape.clone(), vec![gs * norm])),
                ]
            }),
        )
    }

    /// Gaussian high-pass filtering of a real `[C, H, W]` tensor.
    pub fn gaussian_highpass(self, sigma: Var<'g>) -> Var<'g> {
        self.spectrum().highpass_from_spectrum(sigma)
    }

    /// Sum over channels and frequencies of `|DFT(x)|`, shape `[1]`.
    pub fn spectral_abs_sum(self) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3().expect("spectral_abs_sum expects [C, H, W]");
        let spec = fft_real_channels(x.data(), c, h, w);
        let total: f64 = spec.iter().map(|z| z.norm()).sum();
        self.graph().record(
            Tensor::scalar(total),
            &[self],
            Box::new(move |g| {
                let gv = g.item();
                let mut unit: Vec<Complex64> = spec
                    .iter()
                    .map(|z| {
                        let n = z.norm();
                        if n > 0.0 {
                            z / n
                        } else {
                            Complex64::default()
                        }
                    })
                    .collect();
                par::for_each_chunk(&mut unit, h * w, |_, p| fft2_plane(p, h, w, true));
                let gx = unit.iter().map(|z| z.re * gv).collect();
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }
}

/// Naive `O(N^2)` DFT of one plane, for cross-checking the fast path.
pub fn naive_dft_plane(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::default();
            for y in 0..h {
                for xx in 0..w {
                    let theta = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    acc += Complex64::from_polar(x[y * w + xx], theta);
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::check;
    use crate::autograd::Graph;

    fn rnd(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + seed) * 91.345).sin())
    }

    #[test]
    fn constant_map_has_single_dc_coefficient() {
        let x = Tensor::full([1, 4, 4], 0.75);
        let s = dft2(&x).unwrap();
        for u in 0..4 {
            for v in 0..4 {
                let z = s.at(0, u, v);
                if (u, v) == (2, 2) {
                    assert!((z.re - 16.0 * 0.75).abs() < 1e-12 && z.im.abs() < 1e-12);
                } else {
                    assert!(z.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fast_dft_matches_naive_on_odd_and_even_sizes() {
        for (h, w) in [(4, 6), (5, 3), (7, 8)] {
            let x = rnd(&[1, h, w], 0.3);
            let fast = fft_real_channels(x.data(), 1, h, w);
            let slow = naive_dft_plane(x.data(), h, w);
            let err = fast.iter().zip(&slow).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
            assert!(err < 1e-10, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        for (h, w) in [(8, 8), (5, 7)] {
            let x = rnd(&[3, h, w], 1.7);
            let back = idft2(&dft2(&x).unwrap());
            assert!(back.real().max_abs_diff(&x) < 1e-12);
            assert!(back.max_abs_imag() < 1e-12);
        }
    }

    #[test]
    fn real_input_spectrum_is_conjugate_symmetric_about_center() {
        let (h, w) = (6, 8);
        let s = dft2(&rnd(&[1, h, w], 0.9)).unwrap();
        let (uc, vc) = (h / 2, w / 2);
        // Centred index u holds frequency u - uc; its negative lives at 2uc - u (mod h).
        for u in 1..h {
            for v in 1..w {
                let nu = (2 * uc + h - u) % h;
                let nv = (2 * vc + w - v) % w;
                assert!((s.at(0, u, v) - s.at(0, nu, nv).conj()).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn mask_values() {
        let m = gaussian_highpass_mask(32, 32, 12.0).unwrap();
        assert_eq!(m.center, (16, 16));
        assert_eq!(m.at(16, 16), 0.0);
        assert!((m.at(28, 16) - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((m.at(28, 16) - 0.39347).abs() < 1e-5);
        assert!(gaussian_highpass_mask(4, 4, 0.0).is_err());
        assert!(gaussian_highpass_mask(4, 4, -1.0).is_err());
    }

    #[test]
    fn highpass_matches_literal_shift_mask_unshift() {
        let x = rnd(&[2, 6, 5], 0.2);
        let sigma = 1.3;
        let mut spec = dft2(&x).unwrap();
        let m = gaussian_highpass_mask(6, 5, sigma).unwrap();
        for c in 0..2 {
            for u in 0..6 {
                for v in 0..5 {
                    spec.data[(c * 6 + u) * 5 + v] *= m.at(u, v);
                }
            }
        }
        let literal = idft2(&spec);
        assert!(literal.max_abs_imag() < 1e-12);
        let g = Graph::new();
        let y = g
            .constant(x)
            .gaussian_highpass(g.constant(Tensor::scalar(sigma)))
            .value();
        assert!(y.max_abs_diff(&literal.real()) < 1e-12);
    }

    #[test]
    fn spectral_ops_gradcheck() {
        let x = rnd(&[2, 4, 6], 0.5);
        let s = Tensor::scalar(1.7);
        assert!(check(&[x.clone(), s], |_, v| v[0].gaussian_highpass(v[1])) < 1e-6);
        assert!(check(std::slice::from_ref(&x), |_, v| v[0].spectrum()) < 1e-6);
        assert!(check(&[x], |_, v| v[0].spectral_abs_sum()) < 1e-6);
    }
}
