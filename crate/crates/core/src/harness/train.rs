//! Deterministic training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::Sample;
use crate::autograd::Graph;
use crate::backbone::{bilie_forward, init_params, ModelConfig, SIZE_MULTIPLE};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{ensure, Error, Result};
use crate::losses::{total_loss, LossTerms, PerceptualExtractor};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub sample: String,
    pub lr: f64,
    pub l1: f64,
    pub ml: f64,
    pub fft: f64,
    pub colour: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Optimizer steps a run will take over `n_samples` training samples.
pub fn total_steps(cfg: &RunConfig, n_samples: usize) -> usize {
    let all = cfg.train.epochs * n_samples;
    match cfg.train.max_steps {
        0 => all,
        m => all.min(m),
    }
}

/// Loss terms and parameter gradients for one sample.
pub fn loss_and_grads(
    params: &ParamStore,
    sample: &Sample,
    model: &ModelConfig,
    cfg: &RunConfig,
    extractor: &PerceptualExtractor,
) -> Result<(LossTerms, BTreeMap<String, Tensor>)> {
    let g = Graph::new();
    let p = params.bind(&g);
    let x = g.constant(sample.lowlight.clone());
    let v = g.constant(sample.voxels.clone());
    let y = g.constant(sample.gt.clone());
    let out = bilie_forward(x, v, &p, model)?;
    let loss = total_loss(&out.levels, y, x, extractor, &cfg.loss)?;
    if !loss.terms.total.is_finite() {
        return Ok((loss.terms, BTreeMap::new()));
    }
    let grads = g.backward(loss.total);
    Ok((loss.terms, p.grads(&grads)))
}

fn check_samples(samples: &[Sample], bins: usize) -> Result<()> {
    ensure!(!samples.is_empty(), Error::Config("no training samples".into()));
    for s in samples {
        let (_, h, w) = s.lowlight.dims3()?;
        ensure!(
            h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0,
            Error::Shape(format!("{}: training size {h}x{w} is not a multiple of {SIZE_MULTIPLE}", s.name))
        );
        ensure!(
            s.gt.shape() == s.lowlight.shape() && s.voxels.shape() == [bins, h, w],
            Error::Shape(format!("{}: lowlight, ground truth and voxels are misaligned", s.name))
        );
    }
    Ok(())
}

/// Trains from a fresh initialisation. With `out_dir`, the per-step log is
/// streamed to `train_log.csv` and checkpoints go to `checkpoint.safetensors`.
///
/// A non-finite loss aborts the run with [`Error::Numerical`] after the
/// offending step has been logged.
pub fn train(cfg: &RunConfig, samples: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = cfg.model_config();
    check_samples(samples, model.arch.event_bins)?;
    let mut params = init_params(&model, cfg.seed)?;
    let mut adam = Adam::new(&params);
    let extractor = PerceptualExtractor::new(PerceptualExtractor::DEFAULT_SEED);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_da7a);

    let mut writer = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(csv::Writer::from_path(d.join(LOG_FILE))?)
        }
        None => None,
    };
    let total = total_steps(cfg, samples.len());
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (mut step, mut epoch) = (0, 0);
    let snapshot = |params: &ParamStore, adam: &Adam, epoch: usize, step: usize| Checkpoint {
        config: cfg.clone(),
        params: params.clone(),
        optimizer: adam.clone(),
        epoch,
        step,
        seed: cfg.seed,
    };

    while step < total {
        order.shuffle(&mut shuffle_rng);
        for &i in &order {
            if step >= total {
                break;
            }
            let sample = &samples[i];
            let lr = cfg.optim.lr_at(step, total);
            let (terms, grads) = loss_and_grads(&params, sample, &model, cfg, &extractor)?;
            let rec = StepRecord {
                epoch: epoch + 1,
                step: step + 1,
                sample: sample.name.clone(),
                lr,
                l1: terms.l1,
                ml: terms.ml,
                fft: terms.fft,
                colour: terms.colour,
                total: terms.total,
            };
            if let Some(w) = writer.as_mut() {
                w.serialize(&rec)?;
                w.flush()?;
            }
            log.push(rec);
            if !terms.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {} step {} on {}",
                    epoch + 1,
                    step + 1,
                    sample.name
                )));
            }
            adam.update(&mut params, &grads, &cfg.optim, lr)?;
            step += 1;
        }
        epoch += 1;
        log::info!("epoch {epoch}: step {step}/{total}, last loss {:.6}", log.last().map_or(f64::NAN, |r| r.total));
        let every = cfg.train.checkpoint_every;
        if let (Some(d), true) = (out_dir, every > 0 && epoch % every == 0 && step < total) {
            snapshot(&params, &adam, epoch, step).save(&d.join(CHECKPOINT_FILE))?;
        }
    }
    let checkpoint = snapshot(&params, &adam, epoch, step);
    if let Some(d) = out_dir {
        checkpoint.save(&d.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::backbone::pyramid;

    fn sample(name: &str, seed: f64, bins: usize) -> Sample {
        let f = |shape: [usize; 3], s: f64| Tensor::from_fn(shape, |i| 0.5 + 0.4 * ((i as f64 * 0.37 + s) * 3.1).sin());
        let gt = f([3, 16, 16], seed);
        Sample {
            name: name.into(),
            lowlight: gt.scale(0.3),
            voxels: f([bins, 16, 16], seed + 1.0).map(|v| v - 0.5),
            gt,
        }
    }

    fn micro(epochs: usize) -> RunConfig {
        let mut c = RunConfig::micro();
        c.train.epochs = epochs;
        c
    }

    #[test]
    fn step_count_respects_cap() {
        let mut c = micro(5);
        assert_eq!(total_steps(&c, 3), 15);
        c.train.max_steps = 4;
        assert_eq!(total_steps(&c, 3), 4);
    }

    #[test]
    fn cold_start_loss_is_the_raw_input_loss() {
        // Zero-initialised heads make every level prediction equal the
        // downsampled low-light input.
        let c = micro(1);
        let s = sample("a", 0.0, c.model.event_bins);
        let out = train(&c, std::slice::from_ref(&s), None).unwrap();
        let g = Graph::new();
        let x = g.constant(s.lowlight.clone());
        let y = g.constant(s.gt.clone());
        let ex = PerceptualExtractor::new(PerceptualExtractor::DEFAULT_SEED);
        let want = total_loss(&pyramid(x), y, x, &ex, &c.loss).unwrap().terms;
        let got = &out.log[0];
        assert!((got.total - want.total).abs() <= 1e-9 * want.total.abs());
        assert!((got.l1 - want.l1).abs() < 1e-12);
    }

    #[test]
    fn reruns_are_identical_and_logged() {
        let c = micro(2);
        let bins = c.model.event_bins;
        let samples = [sample("a", 0.0, bins), sample("b", 1.0, bins)];
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = train(&c, &samples, Some(d1.path())).unwrap();
        let b = train(&c, &samples, Some(d2.path())).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 4);
        let read = |d: &Path| std::fs::read(d.join(LOG_FILE)).unwrap();
        assert_eq!(read(d1.path()), read(d2.path()));
        assert_eq!(a.checkpoint, b.checkpoint);
        let saved = Checkpoint::load(&d1.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(saved, a.checkpoint);
        assert_eq!((saved.epoch, saved.step), (2, 4));
    }

    #[test]
    fn nan_input_aborts_with_numerical_error() {
        let c = micro(1);
        let mut s = sample("bad", 0.0, c.model.event_bins);
        s.lowlight.data_mut()[5] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = train(&c, &[s], Some(dir.path())).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }

    #[test]
    fn rejects_unaligned_samples() {
        let c = micro(1);
        let mut s = sample("x", 0.0, c.model.event_bins);
        s.voxels = Tensor::zeros([2, 16, 16]);
        assert_eq!(train(&c, &[s], None).unwrap_err().exit_code(), 2);
        assert_eq!(train(&c, &[], None).unwrap_err().exit_code(), 1);
    }
}
