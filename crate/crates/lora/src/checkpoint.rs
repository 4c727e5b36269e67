//! JSON checkpoints of model and adapters, with module tags on every
//! weight.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lora::AdapterSet;
use crate::model::ToyMllm;
use crate::{LoraError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ToyMllm,
    pub adapters: AdapterSet,
}

pub fn save_checkpoint(path: &Path, model: &ToyMllm, adapters: &AdapterSet) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        adapters: adapters.clone(),
    };
    let text = serde_json::to_string(&ck).map_err(|source| LoraError::Json {
        path: path.into(),
        source,
    })?;
    fs::write(path, text).map_err(|source| LoraError::Io {
        path: path.into(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|source| LoraError::Io {
        path: path.into(),
        source,
    })?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|source| LoraError::Json {
        path: path.into(),
        source,
    })?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(LoraError::Config(format!(
            "checkpoint version {} is not supported",
            ck.version
        )));
    }
    ck.model.config.validate()?;
    Ok(ck)
}
