//! Binary checkpoint container.
//!
//! Layout: the header line `structlm-ckpt-v1`, one line of JSON metadata
//! (configs, seed, step, tensor names and shapes), then the raw little-endian
//! `f64` buffers of every parameter in inventory order, followed by the first
//! and second optimizer moments in the same order when present.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};
use crate::pretrain::{AdamW, TrainConfig};
use crate::tensor::Tensor;

pub const HEADER: &str = "structlm-ckpt-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: expected header {HEADER:?}, found {0:?}")]
    Header(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint is truncated: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint does not match its model: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    seed: u64,
    step: u64,
    optimizer_steps: u64,
    has_moments: bool,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
    /// Number of completed training steps.
    pub step: u64,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let meta = Metadata {
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            seed: self.seed,
            step: self.step,
            optimizer_steps: self.optimizer.as_ref().map_or(0, AdamW::steps),
            has_moments: self.optimizer.is_some(),
            tensors: self
                .model
                .specs()
                .iter()
                .map(|s| TensorEntry { name: s.name.clone(), shape: s.shape.clone() })
                .collect(),
        };
        writeln!(w, "{HEADER}")?;
        writeln!(w, "{}", serde_json::to_string(&meta)?)?;
        let mut write_all = |tensors: &[Tensor]| -> std::io::Result<()> {
            for t in tensors {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Ok(())
        };
        write_all(self.model.params())?;
        if let Some(opt) = &self.optimizer {
            write_all(opt.first_moments())?;
            write_all(opt.second_moments())?;
        }
        Ok(())
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != HEADER {
            return Err(CheckpointError::Header(line.trim_end().chars().take(40).collect()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let meta: Metadata = serde_json::from_str(line.trim_end())?;

        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let per_set: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let expected = per_set * if meta.has_moments { 3 } else { 1 };
        if values.len() != expected || bytes.len() % 8 != 0 {
            return Err(CheckpointError::Truncated { expected, found: values.len() });
        }
        let mut cursor = values.into_iter();
        let mut take_set = || -> Vec<Tensor> {
            meta.tensors
                .iter()
                .map(|t| {
                    let n = t.shape.iter().product();
                    Tensor::from_vec(t.shape.clone(), cursor.by_ref().take(n).collect()).expect("counted above")
                })
                .collect()
        };
        let params = take_set();
        let optimizer = if meta.has_moments {
            let m = take_set();
            let v = take_set();
            let cfg = meta.train_config.clone().unwrap_or_default();
            Some(AdamW::from_state(&cfg, meta.optimizer_steps, m, v))
        } else {
            None
        };
        let model = Model::from_params(meta.model_config, params)?;
        for (spec, entry) in model.specs().iter().zip(&meta.tensors) {
            if spec.name != entry.name {
                return Err(ModelError::Config(format!("tensor {} stored where {} belongs", entry.name, spec.name)).into());
            }
        }
        Ok(Self { model, train_config: meta.train_config, seed: meta.seed, step: meta.step, optimizer })
    }
}
