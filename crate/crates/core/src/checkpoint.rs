//! Versioned JSON container for trained parameters and optimiser state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{CmlError, Result};
use crate::model::{MetaParams, ModelParams};
use crate::trainer::{AdamW, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Hash of the dataset manifest the model was trained on.
    pub manifest_hash: Option<String>,
    pub epoch: usize,
    pub iteration: usize,
    pub behaviors: Vec<String>,
    pub target: usize,
    pub model: ModelParams,
    pub meta: MetaParams,
    pub model_optimizer: AdamW,
    pub meta_optimizer: AdamW,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, behaviors: &[String], manifest_hash: Option<String>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: trainer.config.clone(),
            config_hash: trainer.config.hash(),
            manifest_hash,
            epoch: trainer.epoch,
            iteration: trainer.iteration,
            behaviors: behaviors.to_vec(),
            target: trainer.target,
            model: trainer.model.clone(),
            meta: trainer.meta.clone(),
            model_optimizer: trainer.model_opt.clone(),
            meta_optimizer: trainer.meta_opt.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| CmlError::io(path, e))
    }

    /// Loads and checks the version and the config hash.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CmlError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CmlError::Data(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(CmlError::Data("checkpoint config does not match its hash".into()));
        }
        if ck.target >= ck.behaviors.len() {
            return Err(CmlError::Data("checkpoint target behavior out of range".into()));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, SplitAssignment};
    use crate::trainer::TrainingData;
    use std::collections::BTreeMap;

    fn trainer() -> Trainer {
        let train = vec![
            Interaction::new(0, 0, 0),
            Interaction::new(1, 1, 0),
            Interaction::new(0, 1, 1),
        ];
        let data = TrainingData {
            num_users: 2,
            num_items: 3,
            behaviors: vec!["buy".into(), "view".into()],
            target: 0,
            split: SplitAssignment {
                test: BTreeMap::new(),
                meta: Vec::new(),
                train,
            },
        };
        let cfg = TrainConfig {
            dim: 3,
            layers: 1,
            negative_samples: 2,
            ..TrainConfig::default()
        };
        Trainer::new(cfg, &data).unwrap()
    }

    #[test]
    fn round_trip() {
        let mut t = trainer();
        t.step().unwrap();
        let ck = Checkpoint::from_trainer(&t, &["buy".into(), "view".into()], Some("abc".into()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn tampered_config_is_rejected() {
        let t = trainer();
        let mut ck = Checkpoint::from_trainer(&t, &["buy".into(), "view".into()], None);
        ck.config.dim = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CmlError::Data(_))));
    }
}
