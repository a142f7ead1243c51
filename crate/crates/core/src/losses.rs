//! Training objective: multi-scale L1, multi-level contrastive perceptual
//! ratio, multi-scale spectral loss and per-channel colour cosine loss.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::NUM_LEVELS;
use crate::error::{ensure, Error, Result};
use crate::params::{Init, ParamStore, Params};

/// Downsampling factors of the spectral loss.
pub const FFT_SCALES: [usize; 5] = [1, 2, 4, 8, 16];
pub const COLOR_EPS: f64 = 1e-8;
const FEATURE_NORM_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// Per-level weights, level 1 first.
    pub level_weights: Vec<f64>,
    /// Per-tap weights of the perceptual extractor.
    pub sigma_m: Vec<f64>,
    /// Guard added to the perceptual distance to the low-light input.
    pub ml_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.1,
            c: 0.1,
            d: 0.5,
            level_weights: vec![1.0, 0.5, 0.25, 0.125, 0.0625],
            sigma_m: vec![0.2; PerceptualExtractor::TAPS],
            ml_eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a, self.b, self.c, self.d, self.ml_eps]
            .into_iter()
            .chain(self.level_weights.iter().copied())
            .chain(self.sigma_m.iter().copied());
        for v in all {
            ensure!(
                v.is_finite() && v >= 0.0,
                Error::Config(format!("loss weights must be finite and non-negative, got {v}"))
            );
        }
        ensure!(
            self.level_weights.len() == NUM_LEVELS,
            Error::Config(format!("loss.level_weights needs {NUM_LEVELS} entries"))
        );
        ensure!(
            self.sigma_m.len() == PerceptualExtractor::TAPS,
            Error::Config(format!(
                "loss.sigma_m needs {} entries",
                PerceptualExtractor::TAPS
            ))
        );
        ensure!(self.ml_eps > 0.0, Error::Config("loss.ml_eps must be positive".into()));
        Ok(())
    }
}

/// Fixed, seeded five-stage convolutional feature pyramid.
///
/// Each stage is a 3x3 convolution and ReLU, preceded (from stage 2 on) by a
/// 2x2 average pool while the sides are even and at least 2. Features are
/// unit-normalised across channels before comparison.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    weights: ParamStore,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl PerceptualExtractor {
    pub const TAPS: usize = 5;
    pub const DEFAULT_SEED: u64 = 0x1f2e_3d4c;
    const WIDTHS: [usize; Self::TAPS] = [8, 16, 24, 32, 32];

    pub fn new(seed: u64) -> Self {
        let mut init = Init::new(seed);
        let mut ci = 3;
        for (m, &co) in Self::WIDTHS.iter().enumerate() {
            init.conv3x3(&format!("s{m}"), co, ci);
            ci = co;
        }
        let mut weights = init.finish();
        // Default init is scaled for linear layers; widen for ReLU stacks.
        for (_, t) in weights.iter_mut() {
            *t = t.scale(6f64.sqrt());
        }
        Self { weights }
    }

    /// Raw (unnormalised) features at every tap.
    pub fn features<'g>(&self, x: Var<'g>) -> Vec<Var<'g>> {
        let p = self.weights.bind_frozen(x.graph());
        self.features_with(x, &p)
    }

    fn features_with<'g>(&self, x: Var<'g>, p: &Params<'g>) -> Vec<Var<'g>> {
        let mut h = x;
        let mut taps = Vec::with_capacity(Self::TAPS);
        for m in 0..Self::TAPS {
            let s = h.shape();
            if m > 0 && s[1] >= 2 && s[2] >= 2 && s[1].is_multiple_of(2) && s[2].is_multiple_of(2) {
                h = h.avg_pool(2);
            }
            h = p.conv3x3(h, &format!("s{m}")).relu();
            taps.push(h);
        }
        taps
    }

    /// Per-tap distances `mean_xy sum_c (u(a) - u(b))^2` with `u` the channel
    /// unit normalisation, as `[1]` vars.
    pub fn distances<'g>(&self, a: Var<'g>, b: Var<'g>) -> Vec<Var<'g>> {
        let fa = self.features(a);
        let fb = self.features(b);
        fa.into_iter()
            .zip(fb)
            .map(|(x, y)| tap_distance(x, y))
            .collect()
    }
}

fn tap_distance<'g>(x: Var<'g>, y: Var<'g>) -> Var<'g> {
    let d = x
        .unit_normalize_channels(FEATURE_NORM_EPS)
        .sub(y.unit_normalize_channels(FEATURE_NORM_EPS));
    d.square().sum_channels().mean()
}

fn check_levels(preds: &[Var<'_>], targets: &[Var<'_>], weights: &[f64]) -> Result<()> {
    ensure!(
        preds.len() == targets.len() && preds.len() == weights.len(),
        Error::Shape(format!(
            "{} predictions, {} targets, {} level weights",
            preds.len(),
            targets.len(),
            weights.len()
        ))
    );
    for (f, y) in preds.iter().zip(targets) {
        ensure!(
            f.shape() == y.shape(),
            Error::Shape(format!("prediction {:?} vs target {:?}", f.shape(), y.shape()))
        );
    }
    Ok(())
}

/// `sum_l w_l mean|f_l - y_l|`.
pub fn l1_multiscale<'g>(preds: &[Var<'g>], targets: &[Var<'g>], level_weights: &[f64]) -> Result<Var<'g>> {
    check_levels(preds, targets, level_weights)?;
    let terms: Vec<Var<'g>> = preds
        .iter()
        .zip(targets)
        .zip(level_weights)
        .map(|((f, y), &w)| f.sub(*y).abs().mean().mul_const(w))
        .collect();
    Ok(sum_all(&terms))
}

/// `sum_l sum_m w_l sigma_m lpips_m(f_l, y_l) / (lpips_m(f_l, I_l) + eps)`.
pub fn ml_recon_loss<'g>(
    preds: &[Var<'g>],
    targets: &[Var<'g>],
    lowlight: &[Var<'g>],
    extractor: &PerceptualExtractor,
    weights: &LossWeights,
) -> Result<Var<'g>> {
    check_levels(preds, targets, &weights.level_weights)?;
    check_levels(preds, lowlight, &weights.level_weights)?;
    for v in preds.iter().chain(targets).chain(lowlight) {
        ensure!(
            v.value().is_finite(),
            Error::Numerical("non-finite input to the perceptual loss".into())
        );
    }
    let p = extractor.weights.bind_frozen(preds[0].graph());
    let mut terms = Vec::new();
    for l in 0..preds.len() {
        let ff = extractor.features_with(preds[l], &p);
        let fy = extractor.features_with(targets[l], &p);
        let fi = extractor.features_with(lowlight[l], &p);
        for m in 0..PerceptualExtractor::TAPS {
            let num = tap_distance(ff[m], fy[m]);
            let den = tap_distance(ff[m], fi[m]).add_const(weights.ml_eps);
            terms.push(num.div(den).mul_const(weights.level_weights[l] * weights.sigma_m[m]));
        }
    }
    Ok(sum_all(&terms))
}

/// `sum_K (K^2 / HW) sum |DFT(pool_K f) - DFT(pool_K y)|`, over all channels.
pub fn fft_loss<'g>(f: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let s = f.shape();
    ensure!(
        s == y.shape() && s.len() == 3,
        Error::Shape(format!("fft_loss shapes {s:?} vs {:?}", y.shape()))
    );
    let big = FFT_SCALES[FFT_SCALES.len() - 1];
    ensure!(
        s[1].is_multiple_of(big) && s[2].is_multiple_of(big),
        Error::Shape(format!("fft_loss needs sides divisible by {big}, got {s:?}"))
    );
    let diff = f.sub(y);
    let terms: Vec<Var<'g>> = FFT_SCALES
        .iter()
        .map(|&k| {
            let norm = (k * k) as f64 / (s[1] * s[2]) as f64;
            diff.avg_pool(k).spectral_abs_sum().mul_const(norm)
        })
        .collect();
    Ok(sum_all(&terms))
}

/// `1 - mean_c cos(f_c, y_c)`.
pub fn color_loss<'g>(f: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    ensure!(
        f.shape() == y.shape() && f.shape().len() == 3,
        Error::Shape(format!("color_loss shapes {:?} vs {:?}", f.shape(), y.shape()))
    );
    Ok(f.channel_cosine(y, COLOR_EPS).mean().neg().add_const(1.0))
}

fn sum_all<'g>(terms: &[Var<'g>]) -> Var<'g> {
    let (first, rest) = terms.split_first().expect("at least one loss term");
    rest.iter().fold(*first, |acc, t| acc.add(*t))
}

/// Values of the four terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub ml: f64,
    pub fft: f64,
    pub colour: f64,
    pub total: f64,
}

impl LossTerms {
    /// `a L1 + b L_ML + c L_FFT + d L_colour`.
    pub fn weighted(l1: f64, ml: f64, fft: f64, colour: f64, w: &LossWeights) -> Self {
        Self {
            l1,
            ml,
            fft,
            colour,
            total: w.a * l1 + w.b * ml + w.c * fft + w.d * colour,
        }
    }
}

pub struct TotalLoss<'g> {
    pub total: Var<'g>,
    pub terms: LossTerms,
}

/// Full objective. `preds` are the unclamped per-level predictions; `target`
/// and `lowlight` are full-resolution and get area-downsampled per level.
/// The spectral and colour terms use the level-1 prediction.
pub fn total_loss<'g>(
    preds: &[Var<'g>],
    target: Var<'g>,
    lowlight: Var<'g>,
    extractor: &PerceptualExtractor,
    w: &LossWeights,
) -> Result<TotalLoss<'g>> {
    let targets = crate::backbone::pyramid(target);
    let lows = crate::backbone::pyramid(lowlight);
    let l1 = l1_multiscale(preds, &targets, &w.level_weights)?;
    let ml = ml_recon_loss(preds, &targets, &lows, extractor, w)?;
    let fft = fft_loss(preds[0], target)?;
    let colour = color_loss(preds[0], target)?;
    let total = sum_all(&[l1.mul_const(w.a), ml.mul_const(w.b), fft.mul_const(w.c), colour.mul_const(w.d)]);
    let terms = LossTerms {
        l1: l1.item(),
        ml: ml.item(),
        fft: fft.item(),
        colour: colour.item(),
        total: total.item(),
    };
    Ok(TotalLoss { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::check;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    fn rnd(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |i| 0.5 + 0.4 * ((i as f64 * 0.53 + seed) * 9.17).sin())
    }

    #[test]
    fn default_weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            c: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn l1_constant_field() {
        let g = Graph::new();
        let f = g.constant(Tensor::full([3, 4, 4], 0.5));
        let y = g.constant(Tensor::zeros([3, 4, 4]));
        let v = l1_multiscale(&[f], &[y], &[1.0]).unwrap();
        assert_eq!(v.item(), 0.5);
        assert!(l1_multiscale(&[f], &[y, y], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn extractor_distance_is_zero_on_self() {
        let ex = PerceptualExtractor::default();
        let g = Graph::new();
        let x = g.constant(rnd(&[3, 16, 16], 0.0));
        let y = g.constant(rnd(&[3, 16, 16], 1.0));
        for d in ex.distances(x, x) {
            assert_eq!(d.item(), 0.0);
        }
        assert!(ex.distances(x, y).iter().all(|d| d.item() > 0.0));
        // Taps shrink until the sides are odd or 1.
        let shapes: Vec<_> = ex.features(g.constant(rnd(&[3, 4, 4], 0.0))).iter().map(|v| v.shape()).collect();
        assert_eq!(shapes[4], vec![32, 1, 1]);
    }

    #[test]
    fn fft_loss_of_delta() {
        let g = Graph::new();
        let mut d = Tensor::zeros([1, 16, 16]);
        d.data_mut()[37] = 0.3;
        let f = g.constant(d);
        let y = g.constant(Tensor::zeros([1, 16, 16]));
        // At scale K the pooled delta has height 0.3 / K^2 and a flat spectrum.
        let v = fft_loss(f, y).unwrap().item();
        let expect: f64 = FFT_SCALES.iter().map(|&k| 0.3 / (k * k) as f64).sum();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn color_loss_properties() {
        let g = Graph::new();
        let y = rnd(&[3, 4, 4], 0.0);
        let yv = g.constant(y.clone());
        assert!(color_loss(yv, yv).unwrap().item().abs() < 1e-12);
        let scaled = g.constant(y.scale(2.0));
        assert!(color_loss(scaled, yv).unwrap().item().abs() < 1e-12);
        let a = Tensor::from_fn([3, 1, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::from_fn([3, 1, 2], |i| if i % 2 == 1 { 1.0 } else { 0.0 });
        let v = color_loss(g.constant(a), g.constant(b)).unwrap().item();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradchecks() {
        let f = rnd(&[3, 16, 16], 0.1);
        let y = rnd(&[3, 16, 16], 0.9);
        let i = rnd(&[3, 16, 16], 2.2).scale(0.3);
        let ex = PerceptualExtractor::default();
        let w = LossWeights::default();
        let cases: Vec<(&str, f64)> = vec![
            ("fft", check(&[f.clone(), y.clone()], |_, v| fft_loss(v[0], v[1]).unwrap())),
            ("colour", check(&[f.clone(), y.clone()], |_, v| color_loss(v[0], v[1]).unwrap())),
            (
                "l1",
                check(&[f.clone(), y.clone()], |_, v| {
                    l1_multiscale(&crate::backbone::pyramid(v[0]), &crate::backbone::pyramid(v[1]), &w.level_weights)
                        .unwrap()
                }),
            ),
            (
                "ml",
                check(std::slice::from_ref(&f), |g, v| {
                    let yp = crate::backbone::pyramid(g.constant(y.clone()));
                    let ip = crate::backbone::pyramid(g.constant(i.clone()));
                    ml_recon_loss(&crate::backbone::pyramid(v[0]), &yp, &ip, &ex, &w).unwrap()
                }),
            ),
        ];
        for (name, err) in cases {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}
