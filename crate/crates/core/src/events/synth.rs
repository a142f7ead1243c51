use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Event, EventStream};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Offset inside `ln(L + eps)` so black pixels stay finite.
pub const LOG_EPS: f64 = 1e-3;

/// Rec. 601 luma of a `[3, H, W]` image; a `[1, H, W]` image is passed through.
pub fn luminance(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    match c {
        1 => Ok(img.clone()),
        3 => {
            let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
            let data = (0..h * w)
                .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                .collect();
            Tensor::new([1, h, w], data)
        }
        _ => Err(Error::Shape(format!(
            "expected 1 or 3 channels for luminance, got {c}"
        ))),
    }
}

/// Emits threshold-crossing events while log intensity moves linearly from
/// `img_a` to `img_b` over the unit time window `[0, 1]`.
///
/// Each pixel keeps a reference level starting at its `img_a` log intensity
/// and fires one event every time the interpolated signal moves a full
/// `contrast_threshold` away from that reference.
pub fn synth_events(
    img_a: &Tensor,
    img_b: &Tensor,
    contrast_threshold: f64,
    substeps: usize,
) -> Result<EventStream> {
    ensure!(
        contrast_threshold > 0.0 && contrast_threshold.is_finite(),
        Error::InvalidArgument(format!(
            "contrast threshold must be positive, got {contrast_threshold}"
        ))
    );
    ensure!(
        substeps >= 1,
        Error::InvalidArgument("need at least one substep".into())
    );
    img_a.check_same_shape(img_b)?;
    let la = luminance(img_a)?;
    let lb = luminance(img_b)?;
    let (_, h, w) = la.dims3()?;

    let mut events = Vec::new();
    let dt = 1.0 / substeps as f64;
    for (i, (&a, &b)) in la.data().iter().zip(lb.data()).enumerate() {
        let (log_a, log_b) = ((a + LOG_EPS).ln(), (b + LOG_EPS).ln());
        if log_a == log_b {
            continue;
        }
        let (x, y) = ((i % w) as u32, (i / w) as u32);
        let mut reference = log_a;
        for s in 0..substeps {
            let t0 = s as f64 * dt;
            let l0 = log_a + (log_b - log_a) * t0;
            let l1 = log_a + (log_b - log_a) * (t0 + dt);
            loop {
                let (target, p) = if l1 - reference >= contrast_threshold {
                    (reference + contrast_threshold, 1)
                } else if reference - l1 >= contrast_threshold {
                    (reference - contrast_threshold, -1)
                } else {
                    break;
                };
                let frac = ((target - l0) / (l1 - l0)).clamp(0.0, 1.0);
                events.push(Event {
                    t: (t0 + frac * dt).min(1.0),
                    x,
                    y,
                    p,
                });
                reference = target;
            }
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    EventStream::new(events, 0.0, 1.0, w, h)
}

/// Darkens a ground-truth image: `clip((gain * img)^gamma + noise, 0, 1)`.
pub fn synth_lowlight(
    img_gt: &Tensor,
    gain: f64,
    gamma: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Tensor> {
    ensure!(
        gain > 0.0 && gain <= 1.0,
        Error::InvalidArgument(format!("gain must be in (0, 1], got {gain}"))
    );
    ensure!(
        gamma >= 1.0,
        Error::InvalidArgument(format!("gamma must be >= 1, got {gamma}"))
    );
    ensure!(
        noise_std >= 0.0 && noise_std.is_finite(),
        Error::InvalidArgument(format!("noise std must be >= 0, got {noise_std}"))
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = img_gt
        .data()
        .iter()
        .map(|&v| {
            let dark = (gain * v).powf(gamma);
            let noise = if noise_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            (dark + noise).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(img_gt.shape().to_vec(), data)
}
