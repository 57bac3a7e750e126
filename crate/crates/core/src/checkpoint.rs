//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so load(save(m)) reproduces every parameter bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_model::{ModelDims, SyncModel};
use crate::nn::Param;
use crate::trainer::{ErmDims, ErmModel, HiddenStateBank, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum CheckpointModel {
    Sync { dims: ModelDims, bank: HiddenStateBank },
    Erm { dims: ErmDims },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: CheckpointModel,
    pub config: TrainConfig,
    pub config_hash: String,
    pub params: Vec<Param>,
}

impl Checkpoint {
    pub fn from_sync(model: &SyncModel, bank: &HiddenStateBank, config: &TrainConfig) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: CheckpointModel::Sync {
                dims: model.dims,
                bank: bank.clone(),
            },
            config: config.clone(),
            config_hash: config.hash(),
            params: model.store.to_params(),
        }
    }

    pub fn from_erm(model: &ErmModel, config: &TrainConfig) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: CheckpointModel::Erm { dims: model.dims },
            config: config.clone(),
            config_hash: config.hash(),
            params: model.store.to_params(),
        }
    }

    pub fn method(&self) -> &'static str {
        match self.model {
            CheckpointModel::Sync { .. } => "sync",
            CheckpointModel::Erm { .. } => "erm",
        }
    }

    pub fn to_sync(&self) -> Result<(SyncModel, HiddenStateBank)> {
        let CheckpointModel::Sync { dims, bank } = &self.model else {
            return Err(Error::Checkpoint(format!("expected a sync checkpoint, found {}", self.method())));
        };
        let mut model = SyncModel::new(*dims, 0)?;
        model.store.load_params(&self.params)?;
        Ok((model, bank.clone()))
    }

    pub fn to_erm(&self) -> Result<ErmModel> {
        let CheckpointModel::Erm { dims } = &self.model else {
            return Err(Error::Checkpoint(format!("expected an erm checkpoint, found {}", self.method())));
        };
        let mut model = ErmModel::new(*dims, 0);
        model.store.load_params(&self.params)?;
        Ok(model)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_reader(r).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (this build reads {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
