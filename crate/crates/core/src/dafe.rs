//! Dynamic adaptive filtering of event features.
//!
//! Two Gaussian high-pass branches share one forward DFT: a fixed branch with
//! bandwidth `sigma1` and a learnable branch whose bandwidth is predicted from
//! the globally pooled features and confined to `[10, 14]`. A small gating
//! network blends the two.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Init, Params};
use crate::tensor::Tensor;

pub const SIGMA1_DEFAULT: f64 = 12.0;
pub const SIGMA2_CENTER: f64 = 12.0;
pub const SIGMA2_HALF_RANGE: f64 = 2.0;

/// How the fixed and learnable branches are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DafeFusion {
    /// Fixed branch only.
    Fixed,
    /// Channel concatenation followed by a bias-free 1x1 projection.
    Concat,
    Add,
    /// Gated blend.
    #[default]
    Dynamic,
}

impl DafeFusion {
    pub const ALL: [DafeFusion; 4] = [Self::Fixed, Self::Concat, Self::Add, Self::Dynamic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fixed => "fixed",
            Self::Concat => "concat",
            Self::Add => "add",
            Self::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for DafeFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DafeFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown dafe fusion {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DafeConfig {
    pub enabled: bool,
    pub sigma1: f64,
    pub fusion: DafeFusion,
}

impl Default for DafeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma1: SIGMA1_DEFAULT,
            fusion: DafeFusion::Dynamic,
        }
    }
}

/// Hidden width of the sigma and gate predictors.
pub fn hidden_width(channels: usize) -> usize {
    (channels / 4).max(4)
}

/// Registers the parameters of one DAFE instance under `prefix`.
///
/// The last layers of both predictors start at zero, so a fresh module has
/// `sigma2 = 12` and gate weight `0.5`.
pub fn init_dafe(init: &mut Init, prefix: &str, channels: usize, cfg: &DafeConfig) {
    if !cfg.enabled {
        return;
    }
    let hid = hidden_width(channels);
    if cfg.fusion != DafeFusion::Fixed {
        init.conv1x1(&format!("{prefix}.lfb.0"), hid, channels, true);
        init.conv1x1_zero(&format!("{prefix}.lfb.1"), 1, hid);
    }
    match cfg.fusion {
        DafeFusion::Dynamic => {
            init.conv1x1(&format!("{prefix}.lgb.0"), hid, channels, true);
            init.conv1x1_zero(&format!("{prefix}.lgb.1"), 1, hid);
            init.zeros(&format!("{prefix}.gate_bias"), &[1]);
        }
        DafeFusion::Concat => init.conv1x1(&format!("{prefix}.fuse"), channels, 2 * channels, false),
        DafeFusion::Fixed | DafeFusion::Add => {}
    }
}

/// `conv(relu(conv(gap(x))))` as a one-element var.
fn pooled_mlp<'g>(x: Var<'g>, p: &Params<'g>, name: &str) -> Var<'g> {
    let h = p.conv1x1(x.global_avg_pool(), &format!("{name}.0")).relu();
    p.conv1x1(h, &format!("{name}.1")).reshape([1])
}

/// Fixed Gaussian high-pass branch.
pub fn fixed_filter_branch<'g>(x: Var<'g>, sigma1: f64) -> Var<'g> {
    let sigma = x.graph().constant(Tensor::scalar(sigma1));
    x.gaussian_highpass(sigma)
}

/// `12 + 2 tanh(mlp(gap(x)))`.
pub fn predict_sigma2<'g>(x: Var<'g>, p: &Params<'g>, prefix: &str) -> Var<'g> {
    pooled_mlp(x, p, &format!("{prefix}.lfb"))
        .tanh()
        .mul_const(SIGMA2_HALF_RANGE)
        .add_const(SIGMA2_CENTER)
}

/// Learnable high-pass branch; returns the filtered features and `sigma2`.
pub fn learnable_filter_branch<'g>(x: Var<'g>, p: &Params<'g>, prefix: &str) -> (Var<'g>, Var<'g>) {
    let sigma2 = predict_sigma2(x, p, prefix);
    (x.gaussian_highpass(sigma2), sigma2)
}

/// Gate weight `clamp(sigmoid(mlp(gap(x))) + b, 0, 1)`, one element.
pub fn gate_weight<'g>(x: Var<'g>, p: &Params<'g>, prefix: &str) -> Var<'g> {
    pooled_mlp(x, p, &format!("{prefix}.lgb"))
        .sigmoid()
        .add(p.get(&format!("{prefix}.gate_bias")))
        .clamp(0.0, 1.0)
}

/// `weight * fe2 + (1 - weight) * fe1`.
pub fn blend<'g>(fe1: Var<'g>, fe2: Var<'g>, weight: Var<'g>) -> Var<'g> {
    fe1.add(fe2.sub(fe1).scale_by(weight))
}

pub fn gated_fuse<'g>(
    fe1: Var<'g>,
    fe2: Var<'g>,
    f_event: Var<'g>,
    p: &Params<'g>,
    prefix: &str,
) -> Var<'g> {
    blend(fe1, fe2, gate_weight(f_event, p, prefix))
}

/// Result of [`dafe_forward`] with the predicted scalars for logging.
pub struct DafeOutput<'g> {
    pub features: Var<'g>,
    pub sigma2: Option<f64>,
    pub gate: Option<f64>,
}

pub fn dafe_forward<'g>(x: Var<'g>, p: &Params<'g>, prefix: &str, cfg: &DafeConfig) -> DafeOutput<'g> {
    if !cfg.enabled {
        return DafeOutput {
            features: x,
            sigma2: None,
            gate: None,
        };
    }
    let g = x.graph();
    let spec = x.spectrum();
    let fe1 = spec.highpass_from_spectrum(g.constant(Tensor::scalar(cfg.sigma1)));
    if cfg.fusion == DafeFusion::Fixed {
        return DafeOutput {
            features: fe1,
            sigma2: None,
            gate: None,
        };
    }
    let sigma2 = predict_sigma2(x, p, prefix);
    let fe2 = spec.highpass_from_spectrum(sigma2);
    let (features, gate) = match cfg.fusion {
        DafeFusion::Dynamic => {
            let w = gate_weight(x, p, prefix);
            (blend(fe1, fe2, w), Some(w.item()))
        }
        DafeFusion::Add => (fe1.add(fe2), None),
        DafeFusion::Concat => {
            let cat = Var::concat_channels(&[fe1, fe2]);
            (p.conv1x1(cat, &format!("{prefix}.fuse")), None)
        }
        DafeFusion::Fixed => unreachable!(),
    };
    DafeOutput {
        features,
        sigma2: Some(sigma2.item()),
        gate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::fourier::gaussian_highpass_mask;

    fn rnd(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 * 0.7 + seed) * 17.13).sin())
    }

    fn store(c: usize, fusion: DafeFusion, seed: u64) -> crate::params::ParamStore {
        let mut init = Init::new(seed);
        let cfg = DafeConfig {
            fusion,
            ..Default::default()
        };
        init_dafe(&mut init, "d", c, &cfg);
        init.finish()
    }

    #[test]
    fn fusion_names_round_trip() {
        for f in DafeFusion::ALL {
            assert_eq!(f.to_string().parse::<DafeFusion>().unwrap(), f);
        }
        assert!("gated".parse::<DafeFusion>().is_err());
    }

    #[test]
    fn hidden_width_has_floor() {
        assert_eq!(hidden_width(4), 4);
        assert_eq!(hidden_width(64), 16);
    }

    #[test]
    fn zero_init_gives_center_sigma_and_half_gate() {
        let ps = store(8, DafeFusion::Dynamic, 3);
        let g = Graph::new();
        let p = ps.bind(&g);
        let x = g.constant(rnd(&[8, 8, 8], 0.1));
        assert_eq!(predict_sigma2(x, &p, "d").item(), 12.0);
        assert_eq!(gate_weight(x, &p, "d").item(), 0.5);
        let out = dafe_forward(x, &p, "d", &DafeConfig::default());
        let fixed = fixed_filter_branch(x, 12.0).value();
        assert!(out.features.value().max_abs_diff(&fixed) < 1e-12);
    }

    #[test]
    fn disabled_is_identity() {
        let g = Graph::new();
        let p = crate::params::ParamStore::new().bind(&g);
        let x = g.constant(rnd(&[2, 4, 4], 0.0));
        let cfg = DafeConfig {
            enabled: false,
            ..Default::default()
        };
        let out = dafe_forward(x, &p, "d", &cfg);
        assert_eq!(*out.features.value(), *x.value());
    }

    #[test]
    fn fixed_branch_scales_nyquist_checkerboard_by_mask() {
        let n = 16;
        let x = Tensor::from_fn([1, n, n], |i| if (i / n + i % n) % 2 == 0 { 1.0 } else { -1.0 });
        let g = Graph::new();
        let y = fixed_filter_branch(g.constant(x.clone()), 12.0).value();
        // The Nyquist bin sits at shifted index (0, 0), distance sqrt(2) * 8 from the centre.
        let m = gaussian_highpass_mask(n, n, 12.0).unwrap().at(0, 0);
        assert!(y.max_abs_diff(&x.scale(m)) < 1e-12);
    }

    #[test]
    fn blend_endpoints() {
        let g = Graph::new();
        let a = g.constant(rnd(&[2, 3, 3], 0.0));
        let b = g.constant(rnd(&[2, 3, 3], 1.0));
        let w0 = g.constant(Tensor::scalar(0.0));
        let w1 = g.constant(Tensor::scalar(1.0));
        assert_eq!(*blend(a, b, w0).value(), *a.value());
        assert!(blend(a, b, w1).value().max_abs_diff(&b.value()) < 1e-15);
    }

    #[test]
    fn every_fusion_mode_kills_dc() {
        for fusion in DafeFusion::ALL {
            let ps = store(4, fusion, 9);
            let g = Graph::new();
            let p = ps.bind(&g);
            let x = g.constant(rnd(&[4, 8, 8], 2.0).map(|v| v + 3.0));
            let cfg = DafeConfig {
                fusion,
                ..Default::default()
            };
            let y = dafe_forward(x, &p, "d", &cfg).features.value();
            for m in y.channel_means() {
                assert!(m.abs() < 1e-12, "{fusion}: mean {m}");
            }
        }
    }

    #[test]
    fn dafe_gradcheck_all_modes() {
        use crate::autograd::testing::check;
        for fusion in DafeFusion::ALL {
            let ps = store(4, fusion, 5);
            let names: Vec<String> = ps.names().map(str::to_owned).collect();
            let mut inputs = vec![rnd(&[4, 6, 8], 0.3)];
            // Move off the zero init so every parameter carries gradient.
            inputs.extend(names.iter().enumerate().map(|(i, n)| {
                let t = ps.get(n).unwrap();
                Tensor::from_fn(t.shape().to_vec(), |j| 0.3 * ((i * 31 + j) as f64 * 1.37).sin())
            }));
            let cfg = DafeConfig {
                fusion,
                ..Default::default()
            };
            let err = check(&inputs, |g, v| {
                let p = Params::from_vars(g, names.iter().cloned().zip(v[1..].iter().copied()));
                dafe_forward(v[0], &p, "d", &cfg).features
            });
            assert!(err < 1e-5, "{fusion}: {err}");
        }
    }
}
