//! Bidirectional guided cross-attention fusion of image and event features.
//!
//! Stage 1 lets image queries attend to event keys and values and updates the
//! image features; stage 2 lets event queries attend to the updated image
//! features and updates the event features. The two results are concatenated
//! and projected back to `C` channels.
//!
//! Attention is the linear-complexity "efficient attention" form: with per-head
//! `Q, K, V` of shape `[d, N]`, queries are softmax-normalised over the `d`
//! channels of each position and keys over the `N` positions of each channel,
//! and the `d x d` context `rho_k(K) V^T` is formed before touching the queries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{ensure, Error, Result};
use crate::params::{Init, Params};

/// Fusion topology of one level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgafMode {
    /// Stage 1, then stage 2 on the updated image features.
    #[default]
    Sequential,
    /// Both stages on the original features.
    Parallel,
    /// Stage 1 only.
    Img2evt,
    /// Stage 2 only, guided by the original image features.
    Evt2img,
    /// Plain concatenation and projection, no attention.
    ConcatOnly,
}

impl BgafMode {
    pub const ALL: [BgafMode; 5] = [
        Self::Sequential,
        Self::Parallel,
        Self::Img2evt,
        Self::Evt2img,
        Self::ConcatOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sequential => "sequential",
            Self::Parallel => "parallel",
            Self::Img2evt => "img2evt",
            Self::Evt2img => "evt2img",
            Self::ConcatOnly => "concat_only",
        }
    }

    fn uses_stage1(self) -> bool {
        matches!(self, Self::Sequential | Self::Parallel | Self::Img2evt)
    }

    fn uses_stage2(self) -> bool {
        matches!(self, Self::Sequential | Self::Parallel | Self::Evt2img)
    }
}

impl fmt::Display for BgafMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BgafMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown bgaf mode {s:?}")))
    }
}

/// Which projections get the 3x3 depthwise context filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextFilter {
    QOnly,
    #[default]
    Qkv,
}

impl ContextFilter {
    fn filters(self, proj: &str) -> bool {
        self == Self::Qkv || proj == "q"
    }
}

impl FromStr for ContextFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q_only" => Ok(Self::QOnly),
            "qkv" => Ok(Self::Qkv),
            _ => Err(Error::Config(format!("unknown context filter {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BgafConfig {
    pub mode: BgafMode,
    pub context_filter: ContextFilter,
}

fn init_stage(init: &mut Init, prefix: &str, c: usize, ctx: ContextFilter) {
    for proj in ["q", "k", "v"] {
        init.conv1x1(&format!("{prefix}.{proj}"), c, c, true);
        if ctx.filters(proj) {
            init.dwconv3x3(&format!("{prefix}.{proj}_dw"), c);
        }
    }
}

/// Registers the parameters of one BGAF level under `prefix`.
pub fn init_bgaf(init: &mut Init, prefix: &str, channels: usize, cfg: &BgafConfig) {
    if cfg.mode.uses_stage1() {
        init_stage(init, &format!("{prefix}.stage1"), channels, cfg.context_filter);
    }
    if cfg.mode.uses_stage2() {
        init_stage(init, &format!("{prefix}.stage2"), channels, cfg.context_filter);
    }
    init.conv1x1(&format!("{prefix}.fuse"), channels, 2 * channels, true);
}

/// `1x1` projection, optionally followed by the depthwise context filter.
fn project<'g>(x: Var<'g>, p: &Params<'g>, stage: &str, proj: &str, ctx: ContextFilter) -> Var<'g> {
    let y = p.conv1x1(x, &format!("{stage}.{proj}"));
    if ctx.filters(proj) {
        p.dwconv3x3(y, &format!("{stage}.{proj}_dw"))
    } else {
        y
    }
}

/// Linear-order attention `rho_q(Q) (rho_k(K)^T V)` on already projected
/// `[C, H, W]` tensors.
pub fn efficient_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Result<Var<'g>> {
    let shape = q.shape();
    let &[c, h, w] = shape.as_slice() else {
        return Err(Error::Shape(format!("attention expects [C, H, W], got {shape:?}")));
    };
    ensure!(
        k.shape() == shape && v.shape() == shape,
        Error::Shape(format!(
            "attention inputs differ: {shape:?}, {:?}, {:?}",
            k.shape(),
            v.shape()
        ))
    );
    ensure!(
        heads > 0 && c % heads == 0,
        Error::Shape(format!("{c} channels not divisible by {heads} heads"))
    );
    let split = [heads, c / heads, h * w];
    let q = q.reshape(split).softmax(1);
    let k = k.reshape(split).softmax(2);
    let v = v.reshape(split);
    // [heads, d_k, d_v] context, then out[j, n] = sum_i ctx[i, j] q[i, n].
    let context = k.bmm(v, false, true);
    Ok(context.bmm(q, true, false).reshape([c, h, w]))
}

/// Projects queries from `f_query` and keys/values from `f_kv` with the
/// weights under `stage`, then attends.
pub fn efficient_cross_attention<'g>(
    f_query: Var<'g>,
    f_kv: Var<'g>,
    p: &Params<'g>,
    stage: &str,
    heads: usize,
    ctx: ContextFilter,
) -> Result<Var<'g>> {
    ensure!(
        f_query.shape() == f_kv.shape(),
        Error::Shape(format!(
            "cross-attention inputs differ: {:?} vs {:?}",
            f_query.shape(),
            f_kv.shape()
        ))
    );
    let q = project(f_query, p, stage, "q", ctx);
    let k = project(f_kv, p, stage, "k", ctx);
    let v = project(f_kv, p, stage, "v", ctx);
    efficient_attention(q, k, v, heads)
}

/// `F_I' = F_I + CA(Q <- F_I, K/V <- F_E)`.
pub fn bgaf_stage1<'g>(
    f_i: Var<'g>,
    f_e: Var<'g>,
    p: &Params<'g>,
    prefix: &str,
    heads: usize,
    ctx: ContextFilter,
) -> Result<Var<'g>> {
    let a = efficient_cross_attention(f_i, f_e, p, &format!("{prefix}.stage1"), heads, ctx)?;
    Ok(f_i.add(a))
}

/// `F_E' = F_E + CA(Q <- F_E, K/V <- F_I')`.
pub fn bgaf_stage2<'g>(
    f_e: Var<'g>,
    f_i_updated: Var<'g>,
    p: &Params<'g>,
    prefix: &str,
    heads: usize,
    ctx: ContextFilter,
) -> Result<Var<'g>> {
    let a = efficient_cross_attention(f_e, f_i_updated, p, &format!("{prefix}.stage2"), heads, ctx)?;
    Ok(f_e.add(a))
}

/// Fuses one level's image and event features into `C` channels.
pub fn bgaf_forward<'g>(
    f_i: Var<'g>,
    f_e: Var<'g>,
    p: &Params<'g>,
    prefix: &str,
    heads: usize,
    cfg: &BgafConfig,
) -> Result<Var<'g>> {
    ensure!(
        f_i.shape() == f_e.shape(),
        Error::Shape(format!("bgaf inputs differ: {:?} vs {:?}", f_i.shape(), f_e.shape()))
    );
    let ctx = cfg.context_filter;
    let (fi2, fe2) = match cfg.mode {
        BgafMode::Sequential => {
            let fi2 = bgaf_stage1(f_i, f_e, p, prefix, heads, ctx)?;
            let fe2 = bgaf_stage2(f_e, fi2, p, prefix, heads, ctx)?;
            (fi2, fe2)
        }
        BgafMode::Parallel => (
            bgaf_stage1(f_i, f_e, p, prefix, heads, ctx)?,
            bgaf_stage2(f_e, f_i, p, prefix, heads, ctx)?,
        ),
        BgafMode::Img2evt => (bgaf_stage1(f_i, f_e, p, prefix, heads, ctx)?, f_e),
        BgafMode::Evt2img => (f_i, bgaf_stage2(f_e, f_i, p, prefix, heads, ctx)?),
        BgafMode::ConcatOnly => (f_i, f_e),
    };
    let cat = Var::concat_channels(&[fi2, fe2]);
    Ok(p.conv1x1(cat, &format!("{prefix}.fuse")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::check;
    use crate::autograd::Graph;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn rnd(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 * 0.37 + seed) * 23.71).sin())
    }

    fn store(c: usize, mode: BgafMode, ctx: ContextFilter) -> ParamStore {
        let mut init = Init::new(11);
        init_bgaf(
            &mut init,
            "b",
            c,
            &BgafConfig {
                mode,
                context_filter: ctx,
            },
        );
        init.finish()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in BgafMode::ALL {
            assert_eq!(m.to_string().parse::<BgafMode>().unwrap(), m);
        }
        assert!("both".parse::<BgafMode>().is_err());
        assert_eq!("q_only".parse::<ContextFilter>().unwrap(), ContextFilter::QOnly);
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let g = Graph::new();
        let x = g.constant(rnd(&[6, 2, 2], 0.0));
        assert!(efficient_attention(x, x, x, 4).is_err());
        assert!(efficient_attention(x, x, x, 3).is_ok());
    }

    #[test]
    fn zero_value_gives_zero_attention() {
        let g = Graph::new();
        let q = g.constant(rnd(&[4, 3, 3], 0.0));
        let k = g.constant(rnd(&[4, 3, 3], 1.0));
        let v = g.constant(Tensor::zeros([4, 3, 3]));
        assert_eq!(efficient_attention(q, k, v, 2).unwrap().value().max_abs(), 0.0);
    }

    #[test]
    fn zeroed_value_projection_makes_stage_identity() {
        let mut ps = store(4, BgafMode::Sequential, ContextFilter::Qkv);
        for name in ["b.stage1.v.weight", "b.stage1.v.bias", "b.stage1.v_dw.weight", "b.stage1.v_dw.bias"] {
            ps.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let g = Graph::new();
        let p = ps.bind(&g);
        let fi = g.constant(rnd(&[4, 4, 4], 0.2));
        let fe = g.constant(rnd(&[4, 4, 4], 0.9));
        let out = bgaf_stage1(fi, fe, &p, "b", 2, ContextFilter::Qkv).unwrap();
        assert_eq!(*out.value(), *fi.value());
    }

    #[test]
    fn sequential_and_parallel_differ() {
        let ps = store(4, BgafMode::Sequential, ContextFilter::Qkv);
        let g = Graph::new();
        let p = ps.bind(&g);
        let fi = g.constant(rnd(&[4, 4, 4], 0.2));
        let fe = g.constant(rnd(&[4, 4, 4], 0.9));
        let run = |mode| {
            let cfg = BgafConfig {
                mode,
                context_filter: ContextFilter::Qkv,
            };
            bgaf_forward(fi, fe, &p, "b", 2, &cfg).unwrap().value()
        };
        let (s, par) = (run(BgafMode::Sequential), run(BgafMode::Parallel));
        assert_eq!(s.shape(), &[4, 4, 4]);
        assert!(s.max_abs_diff(&par) > 1e-6);
    }

    #[test]
    fn large_inputs_stay_finite() {
        let ps = store(4, BgafMode::Sequential, ContextFilter::Qkv);
        let g = Graph::new();
        let p = ps.bind(&g);
        let fi = g.constant(rnd(&[4, 4, 4], 0.2).scale(1e3));
        let fe = g.constant(rnd(&[4, 4, 4], 0.9).scale(1e3));
        let out = bgaf_forward(fi, fe, &p, "b", 2, &BgafConfig::default()).unwrap();
        assert!(out.value().is_finite());
    }

    #[test]
    fn bgaf_gradcheck_every_mode() {
        for mode in BgafMode::ALL {
            for ctx in [ContextFilter::Qkv, ContextFilter::QOnly] {
                let ps = store(4, mode, ctx);
                let names: Vec<String> = ps.names().map(str::to_owned).collect();
                let mut inputs = vec![rnd(&[4, 4, 2], 0.1), rnd(&[4, 4, 2], 0.7)];
                inputs.extend(ps.iter().map(|(_, t)| t.clone()));
                let cfg = BgafConfig {
                    mode,
                    context_filter: ctx,
                };
                let err = check(&inputs, |g, v| {
                    let p = Params::from_vars(g, names.iter().cloned().zip(v[2..].iter().copied()));
                    bgaf_forward(v[0], v[1], &p, "b", 2, &cfg).unwrap()
                });
                assert!(err < 1e-5, "{mode} {ctx:?}: {err}");
            }
        }
    }
}
