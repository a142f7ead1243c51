//! Ablation grids: component toggles, DAFE fixed-branch bandwidth and fusion,
//! and BGAF structure.

use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::data::Sample;
use super::eval::{evaluate_samples, ModelEnhancer};
use super::train::train;
use crate::bgaf::BgafMode;
use crate::config::RunConfig;
use crate::dafe::DafeFusion;
use crate::error::{Error, Result};

pub const SIGMA1_GRID: [f64; 4] = [10.0, 12.0, 14.0, 16.0];
pub const FUSION_GRID: [DafeFusion; 4] = [DafeFusion::Fixed, DafeFusion::Concat, DafeFusion::Add, DafeFusion::Dynamic];
pub const BGAF_GRID: [BgafMode; 4] = [BgafMode::Img2evt, BgafMode::Evt2img, BgafMode::Parallel, BgafMode::Sequential];

/// `(bgaf, dafe, fft loss, colour loss)` switches, baseline first, full model last.
pub const COMPONENT_GRID: [(bool, bool, bool, bool); 7] = [
    (false, false, false, false),
    (true, false, false, false),
    (false, true, false, false),
    (true, false, true, false),
    (false, true, true, false),
    (true, true, true, false),
    (true, true, true, true),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Module and loss-term toggles.
    LossTerms,
    /// Fusion of the two DAFE branches.
    Dafe,
    Sigma1,
    BgafMode,
    All,
}

impl AblationAxis {
    pub const SINGLE: [AblationAxis; 4] = [Self::LossTerms, Self::Dafe, Self::Sigma1, Self::BgafMode];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LossTerms => "loss_terms",
            Self::Dafe => "dafe",
            Self::Sigma1 => "sigma1",
            Self::BgafMode => "bgaf_mode",
            Self::All => "all",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::LossTerms, Self::Dafe, Self::Sigma1, Self::BgafMode, Self::All]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct GridPoint {
    pub axis: AblationAxis,
    pub label: String,
    pub config: RunConfig,
}

/// Applies one `(bgaf, dafe, fft, colour)` row to `base`. A disabled BGAF
/// falls back to plain concatenation.
pub fn with_components(base: &RunConfig, (bgaf, dafe, fft, colour): (bool, bool, bool, bool)) -> RunConfig {
    let mut c = base.clone();
    if !bgaf {
        c.bgaf.mode = BgafMode::ConcatOnly;
    }
    c.dafe.enabled = dafe;
    if !fft {
        c.loss.c = 0.0;
    }
    if !colour {
        c.loss.d = 0.0;
    }
    c
}

/// Concatenation fusion, no DAFE, no spectral or colour loss.
pub fn naive_baseline(base: &RunConfig) -> RunConfig {
    with_components(base, COMPONENT_GRID[0])
}

fn component_label((bgaf, dafe, fft, colour): (bool, bool, bool, bool)) -> String {
    let on: Vec<&str> = [(bgaf, "bgaf"), (dafe, "dafe"), (fft, "fft"), (colour, "colour")]
        .into_iter()
        .filter_map(|(b, n)| b.then_some(n))
        .collect();
    if on.is_empty() {
        "baseline".into()
    } else {
        on.join("+")
    }
}

pub fn grid(base: &RunConfig, axis: AblationAxis) -> Vec<GridPoint> {
    let point = |axis, label: String, config| GridPoint { axis, label, config };
    match axis {
        AblationAxis::All => AblationAxis::SINGLE.iter().flat_map(|&a| grid(base, a)).collect(),
        AblationAxis::LossTerms => COMPONENT_GRID
            .iter()
            .map(|&row| point(axis, component_label(row), with_components(base, row)))
            .collect(),
        AblationAxis::Dafe => FUSION_GRID
            .iter()
            .map(|&f| {
                let mut c = base.clone();
                c.dafe.enabled = true;
                c.dafe.fusion = f;
                point(axis, f.as_str().into(), c)
            })
            .collect(),
        AblationAxis::Sigma1 => SIGMA1_GRID
            .iter()
            .map(|&s| {
                let mut c = base.clone();
                c.dafe.enabled = true;
                c.dafe.sigma1 = s;
                point(axis, format!("sigma1={s}"), c)
            })
            .collect(),
        AblationAxis::BgafMode => BGAF_GRID
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.bgaf.mode = m;
                point(axis, m.as_str().into(), c)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub label: String,
    pub bgaf_mode: String,
    pub dafe_enabled: bool,
    pub dafe_fusion: String,
    pub sigma1: f64,
    pub loss_c: f64,
    pub loss_d: f64,
    pub steps: usize,
    /// Mean total loss over the last pass through the training set.
    pub final_loss: f64,
    pub train_psnr_db: f64,
    pub train_ssim: f64,
    pub test_psnr_db: f64,
    pub test_ssim: f64,
}

/// Trains and scores one configuration.
pub fn run_point(p: &GridPoint, train_set: &[Sample], test_set: &[Sample]) -> Result<AblationRow> {
    let out = train(&p.config, train_set, None)?;
    let enhancer = ModelEnhancer::from_checkpoint(&out.checkpoint)?;
    let digest = p.config.digest();
    let tr = evaluate_samples(&enhancer, train_set, &digest);
    let te = evaluate_samples(&enhancer, test_set, &digest);
    let tail = &out.log[out.log.len().saturating_sub(train_set.len())..];
    let c = &p.config;
    Ok(AblationRow {
        axis: p.axis.as_str().into(),
        label: p.label.clone(),
        bgaf_mode: c.bgaf.mode.as_str().into(),
        dafe_enabled: c.dafe.enabled,
        dafe_fusion: c.dafe.fusion.as_str().into(),
        sigma1: c.dafe.sigma1,
        loss_c: c.loss.c,
        loss_d: c.loss.d,
        steps: out.checkpoint.step,
        final_loss: tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64,
        train_psnr_db: tr.mean_psnr(),
        train_ssim: tr.mean_ssim(),
        test_psnr_db: te.mean_psnr(),
        test_ssim: te.mean_ssim(),
    })
}

/// Runs every point of `axis` and optionally writes the comparison CSV.
pub fn ablate(
    base: &RunConfig,
    axis: AblationAxis,
    train_set: &[Sample],
    test_set: &[Sample],
    out_csv: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for p in grid(base, axis) {
        log::info!("ablation {} / {}", p.axis.as_str(), p.label);
        rows.push(run_point(&p, train_set, test_set)?);
    }
    if let Some(path) = out_csv {
        let mut w = csv::Writer::from_path(path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}
