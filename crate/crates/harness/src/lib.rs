//! Experiment engine around `msan`: configuration, training, evaluation
//! and ablations.

use std::path::Path;

use msan::data::{generate_synthetic, ClipRecord, GeneratorConfig};
use msan::tensor::{ParamSnapshot, ParamStore};
use msan::{Error as CoreError, ModelConfig, Msan};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub mod ablate;
pub mod config;
pub mod error;
pub mod eval;
pub mod optim;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};

/// Training and validation sets drawn from independent substreams of `root`.
/// The training set has `cfg.num_clips` records.
pub fn synthetic_splits(
    cfg: &GeneratorConfig,
    root: u64,
    valid_clips: usize,
) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    let train_seed: u64 = seeds::substream(root, seeds::Stream::Data).gen();
    let valid_seed: u64 = seeds::substream(root, seeds::Stream::Validation).gen();
    let train = generate_synthetic(cfg, train_seed)?;
    let valid = generate_synthetic(
        &GeneratorConfig {
            num_clips: valid_clips,
            ..cfg.clone()
        },
        valid_seed,
    )?;
    Ok((train, valid))
}

/// A trained model on disk: its configuration plus parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamSnapshot,
}

impl Checkpoint {
    pub fn new(model: &ModelConfig, params: &ParamStore) -> Self {
        Self {
            model: model.clone(),
            params: params.snapshot(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        config::read_json(path).map_err(|e| match e {
            Error::Core(CoreError::Config(m)) => CoreError::Checkpoint(m).into(),
            other => other,
        })
    }

    /// Rebuilds the model and checks the parameters against it.
    pub fn restore(&self) -> Result<(Msan, ParamStore)> {
        let model = Msan::new(self.model.clone())?;
        let params = ParamStore::from_snapshot(&self.params)?;
        model.check_params(&params)?;
        Ok((model, params))
    }
}
