//! Run configuration, stored as a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ArchConfig, ModelConfig, SIZE_MULTIPLE};
use crate::bgaf::BgafConfig;
use crate::dafe::DafeConfig;
use crate::error::{ensure, Error, Result};
use crate::losses::LossWeights;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 means no limit).
    pub max_steps: usize,
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            max_steps: 0,
            batch_size: 1,
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Parameters of the procedural training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub size: usize,
    pub gain: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub contrast_threshold: f64,
    pub substeps: usize,
    /// Brightness factor of the reference frame the events start from.
    pub brightness_shift: f64,
    /// Horizontal and vertical offset of that reference frame, in pixels.
    pub shift_px: usize,
    /// Share of scenes tagged `test`, taken from the end.
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 8,
            size: 64,
            gain: 0.35,
            gamma: 1.1,
            noise_std: 0.002,
            contrast_threshold: 0.2,
            substeps: 8,
            brightness_shift: 0.7,
            shift_px: 1,
            test_fraction: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_scenes > 0 && self.size > 0 && self.size.is_multiple_of(SIZE_MULTIPLE),
            Error::Config(format!(
                "synth needs n_scenes > 0 and size a multiple of {SIZE_MULTIPLE}"
            ))
        );
        ensure!(
            self.gain > 0.0 && self.gain <= 1.0 && self.gamma >= 1.0 && self.noise_std >= 0.0,
            Error::Config("synth.gain must lie in (0, 1], gamma >= 1, noise_std >= 0".into())
        );
        ensure!(
            self.contrast_threshold > 0.0 && self.substeps > 0 && self.brightness_shift > 0.0,
            Error::Config("synth thresholds, substeps and brightness_shift must be positive".into())
        );
        ensure!(
            (0.0..1.0).contains(&self.test_fraction),
            Error::Config("synth.test_fraction must lie in [0, 1)".into())
        );
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ArchConfig,
    pub dafe: DafeConfig,
    pub bgaf: BgafConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// 64x64 inputs, eight scenes.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            model: ArchConfig::desk(),
            dafe: DafeConfig::default(),
            bgaf: BgafConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    /// 256x256 inputs.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.synth.size = 256;
        c.synth.n_scenes = 32;
        c
    }

    /// Smallest network, for tests.
    pub fn micro() -> Self {
        let mut c = Self::desk();
        c.model = ArchConfig::micro();
        c.synth.size = 32;
        c.synth.n_scenes = 2;
        c.train.epochs = 1;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "micro" => Ok(Self::micro()),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.model.clone(),
            dafe: self.dafe.clone(),
            bgaf: self.bgaf.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.synth.validate()?;
        ensure!(
            self.train.batch_size == 1,
            Error::Config(format!(
                "only batch_size = 1 is supported, got {}",
                self.train.batch_size
            ))
        );
        ensure!(self.train.epochs > 0, Error::Config("train.epochs must be positive".into()));
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Applies `key.path=value` assignments, where `value` is a TOML literal
    /// or a bare string, and revalidates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(&self.to_toml()).expect("serialised config parses");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let leaf = parts.pop().filter(|l| !l.is_empty());
            let leaf = leaf.ok_or_else(|| Error::Config(format!("override {o:?} has an empty key")))?;
            let mut table = &mut root;
            for part in parts {
                table = table
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
            }
            table.insert(leaf.to_string(), value);
        }
        Self::from_toml(&toml::to_string(&root).expect("table serialises"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Hex SHA-256 of the serialised config.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
