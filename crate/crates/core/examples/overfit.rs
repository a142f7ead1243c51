//! Overfits a handful of synthetic scenes and reports training PSNR/SSIM as it goes.
//!
//! cargo run --release --example overfit -- [steps] [baseline] [lr]

use std::time::Instant;

use bilie::backbone::init_params;
use bilie::config::RunConfig;
use bilie::harness::ablate::naive_baseline;
use bilie::harness::train::{loss_and_grads, total_steps};
use bilie::harness::{evaluate_samples, load_split, make_synthetic, ModelEnhancer, Split};
use bilie::losses::PerceptualExtractor;
use bilie::optim::Adam;

fn main() -> bilie::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(500);
    let mut cfg = RunConfig::desk();
    if args.iter().any(|a| a == "baseline") {
        cfg = naive_baseline(&cfg);
    }
    if let Some(lr) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.optim.lr = lr;
    }
    cfg.synth.n_scenes = 4;
    cfg.synth.test_fraction = 0.0;
    cfg.train.max_steps = steps;
    cfg.train.epochs = steps.div_ceil(4);
    let dir = tempfile::tempdir()?;
    let manifest = make_synthetic(dir.path(), &cfg.synth, cfg.seed)?;
    let model = cfg.model_config();
    let samples = load_split(&manifest, Split::Train, &model.arch)?;
    let mut params = init_params(&model, cfg.seed)?;
    let mut adam = Adam::new(&params);
    let ex = PerceptualExtractor::new(PerceptualExtractor::DEFAULT_SEED);
    let total = total_steps(&cfg, samples.len());
    let start = Instant::now();
    for step in 0..total {
        let s = &samples[step % samples.len()];
        let (terms, grads) = loss_and_grads(&params, s, &model, &cfg, &ex)?;
        adam.update(&mut params, &grads, &cfg.optim, cfg.optim.lr_at(step, total))?;
        if (step + 1) % 50 == 0 || step == 0 {
            let e = ModelEnhancer { params: params.clone(), model: model.clone() };
            let r = evaluate_samples(&e, &samples, "");
            println!(
                "step {:4} loss {:.4} (l1 {:.4} ml {:.3} fft {:.3} col {:.4}) psnr {:.2} ssim {:.4} [{:.0}s]",
                step + 1, terms.total, terms.l1, terms.ml, terms.fft, terms.colour,
                r.mean_psnr(), r.mean_ssim(), start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
