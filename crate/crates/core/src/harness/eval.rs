//! Evaluation and single-image enhancement.

use std::path::Path;

use super::data::{load_sample, prepare_voxels, Manifest, Sample, Split};
use crate::backbone::{infer, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::events::read_events;
use crate::imaging::{load_png, psnr, save_png, ssim, MetricsReport, MetricsRow};
use crate::par;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Anything that maps a low-light image and its voxel grid to an enhanced image.
pub trait Enhancer: Sync {
    fn enhance(&self, lowlight: &Tensor, voxels: &Tensor) -> Result<Tensor>;
}

pub struct ModelEnhancer {
    pub params: ParamStore,
    pub model: ModelConfig,
}

impl ModelEnhancer {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.config.model_config();
        let fresh = crate::backbone::init_params(&model, 0)?;
        fresh.check_compatible(&ck.params)?;
        Ok(Self {
            params: ck.params.clone(),
            model,
        })
    }
}

impl Enhancer for ModelEnhancer {
    fn enhance(&self, lowlight: &Tensor, voxels: &Tensor) -> Result<Tensor> {
        infer(&self.params, &self.model, lowlight, voxels)
    }
}

/// Returns the low-light input unchanged.
pub struct IdentityEnhancer;

impl Enhancer for IdentityEnhancer {
    fn enhance(&self, lowlight: &Tensor, _voxels: &Tensor) -> Result<Tensor> {
        Ok(lowlight.clone())
    }
}

/// Enhanced image and its metrics against the sample's ground truth.
pub fn score(enhancer: &dyn Enhancer, sample: &Sample) -> Result<(Tensor, MetricsRow)> {
    let out = enhancer.enhance(&sample.lowlight, &sample.voxels)?;
    ensure!(
        out.shape() == sample.gt.shape(),
        Error::Shape(format!(
            "{}: output {:?} does not match ground truth {:?}",
            sample.name,
            out.shape(),
            sample.gt.shape()
        ))
    );
    let row = MetricsRow {
        name: sample.name.clone(),
        psnr_db: psnr(&out, &sample.gt)?,
        ssim: ssim(&out, &sample.gt)?,
    };
    Ok((out, row))
}

fn collect(results: Vec<(String, Result<MetricsRow>)>, digest: &str) -> MetricsReport {
    let mut report = MetricsReport {
        config_digest: digest.to_string(),
        ..Default::default()
    };
    for (name, r) in results {
        match r {
            Ok(row) => report.rows.push(row),
            Err(e) => {
                log::warn!("{name}: {e}");
                report.failures.push((name, e.to_string()));
            }
        }
    }
    report
}

/// Metrics over samples already in memory.
pub fn evaluate_samples(enhancer: &dyn Enhancer, samples: &[Sample], digest: &str) -> MetricsReport {
    let results = par::map_range(samples.len(), |i| {
        (samples[i].name.clone(), score(enhancer, &samples[i]).map(|(_, r)| r))
    });
    collect(results, digest)
}

/// Scores every entry of `split` (all entries when `None`). Items that fail to
/// load or align are recorded as failures and the run continues. With
/// `out_dir`, enhanced PNGs and `metrics.csv` are written there.
pub fn evaluate(
    enhancer: &dyn Enhancer,
    manifest: &Manifest,
    split: Option<Split>,
    model: &ModelConfig,
    out_dir: Option<&Path>,
    digest: &str,
) -> Result<MetricsReport> {
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .collect();
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let results = par::map_range(entries.len(), |i| {
        let entry = entries[i];
        let r = load_sample(manifest, entry, &model.arch).and_then(|s| {
            let (img, row) = score(enhancer, &s)?;
            if let Some(d) = out_dir {
                save_png(&img, &d.join(format!("{}.png", s.name)))?;
            }
            Ok(row)
        });
        (entry.name(), r)
    });
    let report = collect(results, digest);
    if let Some(d) = out_dir {
        report.write_csv(&d.join("metrics.csv"))?;
    }
    Ok(report)
}

/// Loads one low-light PNG and event file and returns the enhanced image.
pub fn enhance_files(enhancer: &ModelEnhancer, lowlight_png: &Path, event_file: &Path) -> Result<Tensor> {
    let low = load_png(lowlight_png)?;
    let stream = read_events(event_file)?;
    let (_, h, w) = low.dims3()?;
    ensure!(
        (stream.height, stream.width) == (h, w),
        Error::input(
            event_file,
            format!("events are {}x{}, image is {h}x{w}", stream.height, stream.width)
        )
    );
    let voxels = prepare_voxels(&stream, &enhancer.model.arch)?;
    enhancer.enhance(&low, &voxels)
}
