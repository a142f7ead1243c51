//! Checkpoints: parameters, optimizer moments and run state in one
//! safetensors archive, with the run config stored as TOML metadata.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const FORMAT: &str = "bilie-checkpoint-1";
const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Serialize, Deserialize)]
struct State {
    epoch: u64,
    step: u64,
    seed: u64,
    adam_step: u64,
    config: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(view: &TensorView<'_>, name: &str, path: &Path) -> Result<Tensor> {
    if view.dtype() != Dtype::F64 {
        return Err(Error::input(path, format!("tensor {name} is {:?}, expected F64", view.dtype())));
    }
    let data = view
        .data()
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(view.shape().to_vec(), data).map_err(|e| Error::input(path, e.to_string()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, map) in [
            (PARAM, self.params.iter().collect::<Vec<_>>()),
            (ADAM_M, self.optimizer.m.iter().collect()),
            (ADAM_V, self.optimizer.v.iter().collect()),
        ] {
            for (k, t) in map {
                named.push((format!("{prefix}{k}"), t.shape().to_vec(), to_bytes(t)));
            }
        }
        let views = named
            .iter()
            .map(|(k, shape, bytes)| Ok((k.as_str(), TensorView::new(Dtype::F64, shape.clone(), bytes)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Numerical(format!("checkpoint encoding: {e}")))?;
        // A single key keeps the header byte-stable; HashMap order is not.
        let state = State {
            epoch: self.epoch as u64,
            step: self.step as u64,
            seed: self.seed,
            adam_step: self.optimizer.step,
            config: self.config.to_toml(),
        };
        let meta = HashMap::from([(FORMAT.to_string(), toml::to_string(&state).expect("state serialises"))]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Numerical(format!("checkpoint encoding: {e}")))
    }

    /// `path` is only used for error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::input(path, msg);
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(FORMAT))
            .ok_or_else(|| bad(format!("not a {FORMAT} file")))?;
        let state: State = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        let config = RunConfig::from_toml(&state.config)?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut params = ParamStore::new();
        let mut optimizer = Adam {
            step: state.adam_step,
            ..Default::default()
        };
        for (name, view) in st.tensors() {
            let t = from_view(&view, &name, path)?;
            if let Some(k) = name.strip_prefix(PARAM) {
                params.insert(k, t);
            } else if let Some(k) = name.strip_prefix(ADAM_M) {
                optimizer.m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(ADAM_V) {
                optimizer.v.insert(k.to_string(), t);
            } else {
                return Err(bad(format!("unexpected tensor {name:?}")));
            }
        }
        Ok(Self {
            config,
            params,
            optimizer,
            epoch: state.epoch as usize,
            step: state.step as usize,
            seed: state.seed,
        })
    }

    /// Writes to a temporary file next to `path`, then renames over it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::input(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_params;

    fn sample() -> Checkpoint {
        let config = RunConfig::micro();
        let params = init_params(&config.model_config(), 3).unwrap();
        let mut optimizer = Adam::new(&params);
        optimizer.step = 7;
        for (i, (_, t)) in optimizer.m.iter_mut().enumerate() {
            t.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = (i as f64 + 0.1) / (j as f64 + 3.0));
        }
        Checkpoint {
            config,
            params,
            optimizer,
            epoch: 2,
            step: 9,
            seed: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn garbage_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap_err().exit_code(), 2);
        assert_eq!(Checkpoint::load(&dir.path().join("missing")).unwrap_err().exit_code(), 2);
    }
}
