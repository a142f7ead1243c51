//! Dual-branch encoder, per-level filtering and fusion, and the decoder.
//!
//! Level 1 is full resolution; level `i` has spatial size `H / 2^(i-1)`. Both
//! encoders embed their input with a 3x3 convolution, run transposed
//! channel-attention (MDTA) and gated depthwise feed-forward (GDFN) blocks at
//! every level and downsample with a space-to-depth 1x1 convolution, which is
//! a stride-2 2x2 convolution. The decoder walks from level 5 back to level 1
//! and emits a 3-channel prediction at every level on top of the area-downsampled
//! low-light input.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::bgaf::{bgaf_forward, init_bgaf, BgafConfig};
use crate::dafe::{dafe_forward, init_dafe, DafeConfig};
use crate::error::{ensure, Error, Result};
use crate::params::{Init, ParamStore, Params};
use crate::tensor::Tensor;

pub const NUM_LEVELS: usize = 5;
pub const IMAGE_CHANNELS: usize = 3;
/// Spatial sides must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << (NUM_LEVELS - 1);
const QK_NORM_EPS: f64 = 1e-12;

/// Network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Attention heads per level, shared by MDTA and BGAF.
    pub heads: Vec<usize>,
    pub ffn_expansion: usize,
    pub event_bins: usize,
    /// Rescale voxel grids to zero mean, unit variance over non-zero cells.
    pub normalize_voxels: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchConfig {
    pub fn desk() -> Self {
        Self {
            channels: vec![16, 32, 64, 128, 192],
            blocks: vec![1, 1, 2, 2, 2],
            heads: vec![2, 4, 4, 4, 6],
            ffn_expansion: 2,
            event_bins: crate::events::NUM_BINS,
            normalize_voxels: false,
        }
    }

    pub fn micro() -> Self {
        Self {
            channels: vec![4, 8, 8, 8, 8],
            blocks: vec![1, 1, 1, 1, 1],
            heads: vec![2, 4, 4, 4, 4],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("channels", &self.channels), ("blocks", &self.blocks), ("heads", &self.heads)] {
            ensure!(
                v.len() == NUM_LEVELS,
                Error::Config(format!("model.{name} needs {NUM_LEVELS} entries, got {}", v.len()))
            );
        }
        for (i, (&c, &h)) in self.channels.iter().zip(&self.heads).enumerate() {
            ensure!(
                c > 0 && h > 0 && c % h == 0,
                Error::Config(format!(
                    "level {}: {c} channels not divisible by {h} heads",
                    i + 1
                ))
            );
        }
        ensure!(
            self.ffn_expansion > 0 && self.event_bins > 0,
            Error::Config("ffn_expansion and event_bins must be positive".into())
        );
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    pub dafe: DafeConfig,
    pub bgaf: BgafConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let s = self.dafe.sigma1;
        ensure!(
            s.is_finite() && s > 0.0,
            Error::Config(format!("dafe.sigma1 must be positive, got {s}"))
        );
        Ok(())
    }

    /// `[C, H, W]` of every level for an `h x w` input.
    pub fn level_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        check_size(h, w)?;
        Ok((0..NUM_LEVELS)
            .map(|i| [self.arch.channels[i], h >> i, w >> i])
            .collect())
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    ensure!(
        h > 0 && w > 0 && h.is_multiple_of(SIZE_MULTIPLE) && w.is_multiple_of(SIZE_MULTIPLE),
        Error::Shape(format!("input {h}x{w} is not a multiple of {SIZE_MULTIPLE}"))
    );
    Ok(())
}

/// Per-level features, level 1 first.
pub struct FeaturePyramid<'g> {
    pub levels: Vec<Var<'g>>,
}

fn init_mdta(init: &mut Init, prefix: &str, c: usize, heads: usize) {
    init.layer_norm(&format!("{prefix}.norm"), c);
    init.conv1x1(&format!("{prefix}.qkv"), 3 * c, c, true);
    init.dwconv3x3(&format!("{prefix}.qkv_dw"), 3 * c);
    init.full(&format!("{prefix}.temperature"), &[heads], 1.0);
    init.conv1x1(&format!("{prefix}.proj"), c, c, true);
}

fn init_gdfn(init: &mut Init, prefix: &str, c: usize, expansion: usize) {
    let hidden = c * expansion;
    init.layer_norm(&format!("{prefix}.norm"), c);
    init.conv1x1(&format!("{prefix}.in"), 2 * hidden, c, true);
    init.dwconv3x3(&format!("{prefix}.in_dw"), 2 * hidden);
    init.conv1x1(&format!("{prefix}.out"), c, hidden, true);
}

fn init_pair(init: &mut Init, prefix: &str, c: usize, heads: usize, expansion: usize) {
    init_mdta(init, &format!("{prefix}.attn"), c, heads);
    init_gdfn(init, &format!("{prefix}.ffn"), c, expansion);
}

fn init_encoder(init: &mut Init, prefix: &str, in_channels: usize, arch: &ArchConfig) {
    init.conv3x3(&format!("{prefix}.embed"), arch.channels[0], in_channels);
    for i in 0..NUM_LEVELS {
        for b in 0..arch.blocks[i] {
            let name = format!("{prefix}.l{}.b{b}", i + 1);
            init_pair(init, &name, arch.channels[i], arch.heads[i], arch.ffn_expansion);
        }
        if i + 1 < NUM_LEVELS {
            let down = format!("{prefix}.down{}", i + 1);
            init.conv1x1(&down, arch.channels[i + 1], 4 * arch.channels[i], true);
        }
    }
}

fn init_decoder(init: &mut Init, arch: &ArchConfig) {
    for i in (0..NUM_LEVELS).rev() {
        let c = arch.channels[i];
        let name = format!("dec.l{}", i + 1);
        if i + 1 < NUM_LEVELS {
            init.conv1x1(&format!("{name}.up"), c, arch.channels[i + 1], true);
            init.conv1x1(&format!("{name}.merge"), c, 2 * c, true);
        }
        init_pair(init, &name, c, arch.heads[i], arch.ffn_expansion);
        init.conv1x1_zero(&format!("{name}.head"), IMAGE_CHANNELS, c);
    }
}

/// Builds a freshly initialised parameter set; decoder heads start at zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let arch = &cfg.arch;
    let mut init = Init::new(seed);
    init_encoder(&mut init, "enc_img", IMAGE_CHANNELS, arch);
    init_encoder(&mut init, "enc_evt", arch.event_bins, arch);
    for i in 0..NUM_LEVELS {
        let c = arch.channels[i];
        init_dafe(&mut init, &format!("dafe.l{}", i + 1), c, &cfg.dafe);
        init_bgaf(&mut init, &format!("bgaf.l{}", i + 1), c, &cfg.bgaf);
    }
    init_decoder(&mut init, arch);
    Ok(init.finish())
}

/// Splits `[C, H, W]` into `[heads, C / heads, H * W]`.
fn split_heads<'g>(x: Var<'g>, heads: usize) -> Var<'g> {
    let s = x.shape();
    x.reshape([heads, s[0] / heads, s[1] * s[2]])
}

/// Transposed (channel) self-attention with a per-head learnable temperature.
pub fn mdta_block<'g>(x: Var<'g>, p: &Params<'g>, prefix: &str, heads: usize) -> Var<'g> {
    let shape = x.shape();
    let c = shape[0];
    let y = p.layer_norm(x, &format!("{prefix}.norm"));
    let qkv = p.dwconv3x3(p.conv1x1(y, &format!("{prefix}.qkv")), &format!("{prefix}.qkv_dw"));
    let q = split_heads(qkv.narrow_channels(0, c), heads).l2_normalize_rows(QK_NORM_EPS);
    let k = split_heads(qkv.narrow_channels(c, c), heads).l2_normalize_rows(QK_NORM_EPS);
    let v = split_heads(qkv.narrow_channels(2 * c, c), heads);
    let attn = q
        .bmm(k, false, true)
        .scale_batches(p.get(&format!("{prefix}.temperature")))
        .softmax(2);
    let out = attn.bmm(v, false, false).reshape(shape);
    x.add(p.conv1x1(out, &format!("{prefix}.proj")))
}

/// Gated depthwise feed-forward: `x + W_out(gelu(a) * b)`.
pub fn gdfn_block<'g>(x: Var<'g>, p: &Params<'g>, prefix: &str) -> Var<'g> {
    let y = p.layer_norm(x, &format!("{prefix}.norm"));
    let h = p.dwconv3x3(p.conv1x1(y, &format!("{prefix}.in")), &format!("{prefix}.in_dw"));
    let hidden = h.shape()[0] / 2;
    let gated = h.narrow_channels(0, hidden).gelu().mul(h.narrow_channels(hidden, hidden));
    x.add(p.conv1x1(gated, &format!("{prefix}.out")))
}

fn block_pair<'g>(x: Var<'g>, p: &Params<'g>, prefix: &str, heads: usize) -> Var<'g> {
    let x = mdta_block(x, p, &format!("{prefix}.attn"), heads);
    gdfn_block(x, p, &format!("{prefix}.ffn"))
}

/// Which encoder to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Image,
    Event,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Image => "enc_img",
            Branch::Event => "enc_evt",
        }
    }
}

pub fn encode<'g>(x: Var<'g>, branch: Branch, p: &Params<'g>, arch: &ArchConfig) -> Result<FeaturePyramid<'g>> {
    let s = x.shape();
    ensure!(s.len() == 3, Error::Shape(format!("encoder expects [C, H, W], got {s:?}")));
    check_size(s[1], s[2])?;
    let expected = match branch {
        Branch::Image => IMAGE_CHANNELS,
        Branch::Event => arch.event_bins,
    };
    ensure!(
        s[0] == expected,
        Error::Shape(format!("{branch:?} encoder expects {expected} channels, got {}", s[0]))
    );
    let prefix = branch.prefix();
    let mut h = p.conv3x3(x, &format!("{prefix}.embed"));
    let mut levels = Vec::with_capacity(NUM_LEVELS);
    for i in 0..NUM_LEVELS {
        for b in 0..arch.blocks[i] {
            h = block_pair(h, p, &format!("{prefix}.l{}.b{b}", i + 1), arch.heads[i]);
        }
        levels.push(h);
        if i + 1 < NUM_LEVELS {
            h = p.conv1x1(h.pixel_unshuffle(), &format!("{prefix}.down{}", i + 1));
        }
    }
    Ok(FeaturePyramid { levels })
}

/// Coarse-to-fine decoding. Returns the unclamped per-level predictions
/// `head_l + I_l`, level 1 first.
pub fn decode<'g>(
    fused: &FeaturePyramid<'g>,
    lowlight_pyramid: &[Var<'g>],
    p: &Params<'g>,
    arch: &ArchConfig,
) -> Result<Vec<Var<'g>>> {
    ensure!(
        fused.levels.len() == NUM_LEVELS && lowlight_pyramid.len() == NUM_LEVELS,
        Error::Shape("decoder needs five levels".into())
    );
    let mut preds = vec![None; NUM_LEVELS];
    let mut state: Option<Var<'g>> = None;
    for i in (0..NUM_LEVELS).rev() {
        let name = format!("dec.l{}", i + 1);
        let x = match state {
            None => fused.levels[i],
            Some(prev) => {
                let up = p.conv1x1(prev.upsample_nearest2x(), &format!("{name}.up"));
                p.conv1x1(Var::concat_channels(&[up, fused.levels[i]]), &format!("{name}.merge"))
            }
        };
        let x = block_pair(x, p, &name, arch.heads[i]);
        let head = p.conv1x1(x, &format!("{name}.head"));
        preds[i] = Some(head.add(lowlight_pyramid[i]));
        state = Some(x);
    }
    Ok(preds.into_iter().map(Option::unwrap).collect())
}

/// Area-downsampled copies of `x` at every level.
pub fn pyramid<'g>(x: Var<'g>) -> Vec<Var<'g>> {
    (0..NUM_LEVELS).map(|i| x.avg_pool(1 << i)).collect()
}

pub struct ForwardOutput<'g> {
    /// Level-1 prediction clamped to `[0, 1]`.
    pub image: Var<'g>,
    /// Unclamped predictions per level, level 1 first.
    pub levels: Vec<Var<'g>>,
    pub sigma2: Vec<f64>,
    pub gates: Vec<f64>,
}

/// Full forward pass on a `[3, H, W]` image and a `[bins, H, W]` voxel grid.
pub fn bilie_forward<'g>(
    lowlight: Var<'g>,
    voxels: Var<'g>,
    p: &Params<'g>,
    cfg: &ModelConfig,
) -> Result<ForwardOutput<'g>> {
    let (ls, vs) = (lowlight.shape(), voxels.shape());
    ensure!(
        ls.len() == 3 && vs.len() == 3 && ls[1..] == vs[1..],
        Error::Shape(format!("image {ls:?} and voxels {vs:?} are not aligned"))
    );
    let arch = &cfg.arch;
    let fi = encode(lowlight, Branch::Image, p, arch)?;
    let fe = encode(voxels, Branch::Event, p, arch)?;
    let mut fused = Vec::with_capacity(NUM_LEVELS);
    let (mut sigma2, mut gates) = (Vec::new(), Vec::new());
    for i in 0..NUM_LEVELS {
        let d = dafe_forward(fe.levels[i], p, &format!("dafe.l{}", i + 1), &cfg.dafe);
        sigma2.extend(d.sigma2);
        gates.extend(d.gate);
        let name = format!("bgaf.l{}", i + 1);
        fused.push(bgaf_forward(fi.levels[i], d.features, p, &name, arch.heads[i], &cfg.bgaf)?);
    }
    let levels = decode(&FeaturePyramid { levels: fused }, &pyramid(lowlight), p, arch)?;
    Ok(ForwardOutput {
        image: levels[0].clamp(0.0, 1.0),
        levels,
        sigma2,
        gates,
    })
}

/// Inference on arbitrary sizes: reflect-pad to a multiple of 16, run the
/// network with frozen parameters, crop back.
pub fn infer(params: &ParamStore, cfg: &ModelConfig, lowlight: &Tensor, voxels: &Tensor) -> Result<Tensor> {
    let (_, h, w) = lowlight.dims3()?;
    let (_, vh, vw) = voxels.dims3()?;
    ensure!(
        (h, w) == (vh, vw),
        Error::Shape(format!("image {h}x{w} and voxels {vh}x{vw} are not aligned"))
    );
    let ph = h.next_multiple_of(SIZE_MULTIPLE) - h;
    let pw = w.next_multiple_of(SIZE_MULTIPLE) - w;
    let g = crate::autograd::Graph::new();
    let p = params.bind_frozen(&g);
    let x = g.constant(lowlight.pad_reflect(ph, pw)?);
    let v = g.constant(voxels.pad_reflect(ph, pw)?);
    let out = bilie_forward(x, v, &p, cfg)?;
    out.image.value().crop(h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::check;
    use crate::autograd::Graph;
    use crate::bgaf::BgafMode;

    fn rnd(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |i| 0.5 + 0.4 * ((i as f64 * 0.61 + seed) * 7.77).sin())
    }

    fn micro() -> ModelConfig {
        ModelConfig {
            arch: ArchConfig::micro(),
            ..Default::default()
        }
    }

    #[test]
    fn validation_rejects_indivisible_heads() {
        let mut cfg = micro();
        assert!(cfg.validate().is_ok());
        cfg.arch.channels[4] = 6;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.arch.channels.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = micro();
        cfg.dafe.sigma1 = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_heads_divide_channels() {
        assert!(ArchConfig::desk().validate().is_ok());
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let a = init_params(&micro(), 1).unwrap();
        let b = init_params(&micro(), 2).unwrap();
        assert_eq!(a.num_scalars(), b.num_scalars());
        assert_ne!(a, b);
        assert_eq!(a, init_params(&micro(), 1).unwrap());
    }

    #[test]
    fn level_shapes_halve() {
        let s = micro().level_shapes(64, 32).unwrap();
        assert_eq!(s, vec![[4, 64, 32], [8, 32, 16], [8, 16, 8], [8, 8, 4], [8, 4, 2]]);
        assert!(micro().level_shapes(40, 32).is_err());
    }

    #[test]
    fn encoder_shapes_follow_config() {
        let cfg = micro();
        let ps = init_params(&cfg, 0).unwrap();
        let g = Graph::new();
        let p = ps.bind_frozen(&g);
        let pyr = encode(g.constant(rnd(&[3, 32, 32], 0.0)), Branch::Image, &p, &cfg.arch).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|v| v.shape()).collect();
        let want: Vec<Vec<usize>> = cfg
            .level_shapes(32, 32)
            .unwrap()
            .iter()
            .map(|s| s.to_vec())
            .collect();
        assert_eq!(shapes, want);
        let bad = encode(g.constant(rnd(&[3, 24, 32], 0.0)), Branch::Image, &p, &cfg.arch);
        assert!(bad.is_err());
    }

    #[test]
    fn zero_heads_return_the_input() {
        let cfg = micro();
        let ps = init_params(&cfg, 0).unwrap();
        let g = Graph::new();
        let p = ps.bind_frozen(&g);
        let x = rnd(&[3, 32, 32], 0.3).map(|v| v * 1.4 - 0.1);
        let out = bilie_forward(g.constant(x.clone()), g.constant(rnd(&[5, 32, 32], 1.0)), &p, &cfg).unwrap();
        assert_eq!(out.levels.len(), NUM_LEVELS);
        assert_eq!(*out.image.value(), x.clamp(0.0, 1.0));
        assert_eq!(out.levels[4].shape(), vec![3, 2, 2]);
        assert_eq!(out.sigma2, vec![12.0; 5]);
        assert_eq!(out.gates, vec![0.5; 5]);
    }

    #[test]
    fn zero_projection_blocks_are_identity() {
        let mut init = Init::new(4);
        init_mdta(&mut init, "a", 8, 2);
        init_gdfn(&mut init, "f", 8, 2);
        let mut ps = init.finish();
        for n in ["a.proj.weight", "a.proj.bias", "f.out.weight", "f.out.bias"] {
            ps.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let g = Graph::new();
        let p = ps.bind(&g);
        let x = g.constant(rnd(&[8, 8, 8], 0.2));
        assert_eq!(*mdta_block(x, &p, "a", 2).value(), *x.value());
        assert_eq!(*gdfn_block(x, &p, "f").value(), *x.value());
    }

    #[test]
    fn block_gradcheck() {
        let mut init = Init::new(4);
        init_mdta(&mut init, "a", 8, 2);
        init_gdfn(&mut init, "f", 8, 2);
        let ps = init.finish();
        let names: Vec<String> = ps.names().map(str::to_owned).collect();
        let mut inputs = vec![rnd(&[8, 8, 8], 0.2)];
        inputs.extend(ps.iter().map(|(_, t)| t.clone()));
        let err = check(&inputs, |g, v| {
            let p = Params::from_vars(g, names.iter().cloned().zip(v[1..].iter().copied()));
            gdfn_block(mdta_block(v[0], &p, "a", 2), &p, "f")
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn infer_pads_and_crops() {
        let mut cfg = micro();
        cfg.bgaf.mode = BgafMode::ConcatOnly;
        let ps = init_params(&cfg, 0).unwrap();
        let x = rnd(&[3, 20, 18], 0.0);
        let y = infer(&ps, &cfg, &x, &rnd(&[5, 20, 18], 0.5)).unwrap();
        assert_eq!(y.shape(), &[3, 20, 18]);
        assert_eq!(y, x.clamp(0.0, 1.0));
    }
}
