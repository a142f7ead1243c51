//! `bilie` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration error, 2 input error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bilie::checkpoint::Checkpoint;
use bilie::config::RunConfig;
use bilie::harness::{self, AblationAxis, Manifest, ModelEnhancer, Split};
use bilie::imaging::{load_png, save_png, white_balance_grayworld_green};
use bilie::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bilie", version, about = "Event-guided low-light image enhancement")]
struct Cli {
    /// Log filter, e.g. `info` or `bilie=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Run configuration: a preset or TOML file, then individual overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration (overrides --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: desk, full or micro.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Any config key as `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset)?,
        };
        let mut sets = Vec::new();
        if let Some(v) = self.seed {
            sets.push(format!("seed={v}"));
        }
        if let Some(v) = self.epochs {
            sets.push(format!("train.epochs={v}"));
        }
        if let Some(v) = self.max_steps {
            sets.push(format!("train.max_steps={v}"));
        }
        if let Some(v) = self.lr {
            sets.push(format!("optim.lr={v:e}"));
        }
        sets.extend(self.sets.iter().cloned());
        base.with_overrides(&sets)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate procedural training triplets and a manifest.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_scenes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on the `train` split of a manifest.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory for the log, checkpoint and resolved config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint against ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// train, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for enhanced PNGs and metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enhance a single image.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lowlight: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score a grid of model variants.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// loss_terms, dafe, sigma1, bgaf_mode or all.
        #[arg(long)]
        axis: String,
        /// Comparison CSV.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Gray-world white balance with green as the reference channel.
    WhiteBalance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn manifest_path(arg: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    arg.or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| Error::Config("no manifest given (--manifest or data.manifest)".into()))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::MakeSynthetic { out, n_scenes, size, cfg } => {
            let mut c = cfg.resolve()?;
            c.synth.n_scenes = n_scenes.unwrap_or(c.synth.n_scenes);
            c.synth.size = size.unwrap_or(c.synth.size);
            let m = harness::make_synthetic(&out, &c.synth, c.seed)?;
            println!(
                "wrote {} scenes ({} test) to {}",
                m.entries.len(),
                m.split(Split::Test).count(),
                out.join(harness::MANIFEST_FILE).display()
            );
        }
        Cmd::Train { manifest, out, cfg } => {
            let c = cfg.resolve()?;
            let manifest = Manifest::load(&manifest_path(manifest, &c)?)?;
            let samples = harness::load_split(&manifest, Split::Train, &c.model)?;
            let out = out.or_else(|| c.data.out_dir.clone());
            if let Some(d) = &out {
                std::fs::create_dir_all(d)?;
                c.save(&d.join("config.toml"))?;
            }
            let result = harness::train(&c, &samples, out.as_deref())?;
            let last = result.log.last().map_or(f64::NAN, |r| r.total);
            println!("trained {} steps, final loss {last:.6}", result.checkpoint.step);
            if let Some(d) = out {
                println!("checkpoint: {}", d.join(harness::CHECKPOINT_FILE).display());
            }
        }
        Cmd::Eval { checkpoint, manifest, split, out } => {
            let split = match split.as_str() {
                "all" => None,
                s => Some(s.parse::<Split>()?),
            };
            let ck = Checkpoint::load(&checkpoint)?;
            let enhancer = ModelEnhancer::from_checkpoint(&ck)?;
            let manifest = Manifest::load(&manifest)?;
            let digest = ck.config.digest();
            let report = harness::evaluate(&enhancer, &manifest, split, &enhancer.model, out.as_deref(), &digest)?;
            for r in &report.rows {
                println!("{:<24} {:>8.3} dB  SSIM {:.4}", r.name, r.psnr_db, r.ssim);
            }
            for (name, msg) in &report.failures {
                println!("{name:<24} failed: {msg}");
            }
            println!("mean PSNR {:.3} dB, SSIM {:.4} over {} images", report.mean_psnr(), report.mean_ssim(), report.count());
        }
        Cmd::Enhance { checkpoint, lowlight, events, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let enhancer = ModelEnhancer::from_checkpoint(&ck)?;
            let img = harness::enhance_files(&enhancer, &lowlight, &events)?;
            save_png(&img, &out)?;
        }
        Cmd::Ablate { manifest, axis, out, cfg } => {
            let axis: AblationAxis = axis.parse()?;
            let c = cfg.resolve()?;
            let manifest = Manifest::load(&manifest)?;
            let train_set = harness::load_split(&manifest, Split::Train, &c.model)?;
            let test_set = harness::load_split(&manifest, Split::Test, &c.model)?;
            let rows = harness::ablate(&c, axis, &train_set, &test_set, Some(&out))?;
            for r in rows {
                println!(
                    "{:<10} {:<24} train {:>7.3} dB / {:.4}   test {:>7.3} dB / {:.4}",
                    r.axis, r.label, r.train_psnr_db, r.train_ssim, r.test_psnr_db, r.test_ssim
                );
            }
        }
        Cmd::WhiteBalance { input, out } => {
            let img = load_png(&input)?;
            save_png(&white_balance_grayworld_green(&img).map_err(|e| with_path(e, &input))?, &out)?;
        }
    }
    Ok(())
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::InvalidArgument(msg) | Error::Numerical(msg) => Error::input(path, msg),
        other => other,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
