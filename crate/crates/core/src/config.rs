//! Training hyperparameters.

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CmlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// Switches that turn off one component of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Ablation {
    /// Drop the contrastive block entirely.
    pub clf: bool,
    /// Force every loss weight to 1 and train single-level.
    pub mcn: bool,
    /// Replace the meta-knowledge weight network by one learned gate per pair.
    pub mke: bool,
}

impl Ablation {
    pub fn parse(names: &[String]) -> Result<Self> {
        let mut a = Ablation::default();
        for n in names {
            match n.to_ascii_lowercase().as_str() {
                "clf" => a.clf = true,
                "mcn" => a.mcn = true,
                "mke" => a.mke = true,
                other => {
                    return Err(CmlError::config(
                        "ablate",
                        format!("unknown component `{other}` (expected clf, mcn or mke)"),
                    ))
                }
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.clf {
            parts.push("w/o-CLF");
        }
        if self.mcn {
            parts.push("w/o-MCN");
        }
        if self.mke {
            parts.push("w/o-MKE");
        }
        if parts.is_empty() {
            "CML".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Propagation layers `L`.
    pub layers: usize,
    /// Embedding width `d`.
    pub dim: usize,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Negative users per anchor in the contrastive denominator.
    pub negative_samples: usize,
    /// Scale applied to the duplicated loss inside the first meta-knowledge encoder.
    pub gamma: f64,
    /// Weight of the contrastive block relative to BPR.
    pub beta: f64,
    /// L2 coefficient on the graph model parameters.
    pub l2: f64,
    /// Dropout applied to meta-knowledge rows in training.
    pub dropout: f64,
    pub meta_batch: usize,
    pub train_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Iterations from base to max learning rate; a full cycle is twice this.
    pub lr_half_cycle: usize,
    pub weight_decay: f64,
    /// Learning rate of the meta weight network.
    pub meta_lr: f64,
    /// Step size of the SGD lookahead in the bilevel phase. `None` uses the
    /// current cyclical learning rate.
    pub lookahead_lr: Option<f64>,
    pub similarity: Similarity,
    /// Symmetric degree normalisation of the adjacency.
    pub normalize: bool,
    /// Sum BPR over every behavior instead of the target only.
    pub bpr_all_behaviors: bool,
    pub ablation: Ablation,
    /// Early-stopping patience in epochs, measured on validation HR@10.
    pub patience: usize,
    pub eval_negatives: usize,
    pub top_k: usize,
    pub full_rank: bool,
    /// Evaluate on the validation split every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 32,
            temperature: 0.1,
            negative_samples: 256,
            gamma: 10.0,
            beta: 1.0,
            l2: 1e-3,
            dropout: 0.1,
            meta_batch: 512,
            train_batch: 1024,
            epochs: 100,
            seed: 0,
            base_lr: 1e-4,
            max_lr: 1e-3,
            lr_half_cycle: 40,
            weight_decay: 0.01,
            meta_lr: 1e-4,
            lookahead_lr: None,
            similarity: Similarity::Cosine,
            normalize: true,
            bpr_all_behaviors: false,
            ablation: Ablation::default(),
            patience: 10,
            eval_negatives: 99,
            top_k: 10,
            full_rank: false,
            eval_every: 1,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CmlError::config(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(CmlError::config(field, format!("must be non-negative, got {v}")))
    }
}

fn nonzero(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(CmlError::config(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        nonzero("layers", self.layers)?;
        nonzero("dim", self.dim)?;
        positive("temperature", self.temperature)?;
        nonzero("negative_samples", self.negative_samples)?;
        positive("gamma", self.gamma)?;
        non_negative("beta", self.beta)?;
        non_negative("l2", self.l2)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CmlError::config("dropout", format!("must lie in [0, 1), got {}", self.dropout)));
        }
        nonzero("meta_batch", self.meta_batch)?;
        nonzero("train_batch", self.train_batch)?;
        non_negative("base_lr", self.base_lr)?;
        non_negative("max_lr", self.max_lr)?;
        if self.base_lr > self.max_lr {
            return Err(CmlError::config(
                "base_lr",
                format!("base_lr {} exceeds max_lr {}", self.base_lr, self.max_lr),
            ));
        }
        nonzero("lr_half_cycle", self.lr_half_cycle)?;
        non_negative("weight_decay", self.weight_decay)?;
        non_negative("meta_lr", self.meta_lr)?;
        if let Some(a) = self.lookahead_lr {
            non_negative("lookahead_lr", a)?;
        }
        nonzero("top_k", self.top_k)?;
        nonzero("eval_negatives", self.eval_negatives)?;
        nonzero("eval_every", self.eval_every)?;
        if self.meta_batch > self.train_batch {
            warn!(
                "meta_batch {} exceeds train_batch {}; smaller meta batches usually work better",
                self.meta_batch, self.train_batch
            );
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex_digest(&bytes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
