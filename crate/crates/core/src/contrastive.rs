//! InfoNCE between the target-behavior view and each auxiliary view of a user.

use log::warn;
use rand::Rng;

use crate::config::Similarity;
use crate::encoder::EncoderOutput;
use crate::error::{CmlError, Result};
use crate::tape::{Tape, Var};

/// Anchors and shared negatives for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<usize>,
    pub negatives: Vec<usize>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(anchors: Vec<usize>, negatives: Vec<usize>, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(CmlError::config("temperature", format!("must be positive, got {temperature}")));
        }
        if negatives.is_empty() {
            return Err(CmlError::config("negative_samples", "negative pool is empty"));
        }
        let mut sorted = anchors.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CmlError::Contract("anchor users must be unique".into()));
        }
        Ok(Self {
            anchors,
            negatives,
            temperature,
        })
    }

    /// `count` negatives drawn uniformly (with replacement) from all users.
    pub fn sample<R: Rng + ?Sized>(
        anchors: Vec<usize>,
        num_users: usize,
        count: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let negatives = (0..count).map(|_| rng.gen_range(0..num_users)).collect();
        Self::new(anchors, negatives, temperature)
    }
}

/// Loss nodes of one `(target, auxiliary)` pair.
#[derive(Debug, Clone, Copy)]
pub struct PairLoss {
    pub auxiliary: usize,
    /// `1 × 1`, sum of `per_user`.
    pub total: Var,
    /// `B × 1`, one InfoNCE term per anchor.
    pub per_user: Var,
}

/// Per anchor `u`: `−log( exp(φ(e_u^k, e_u^k')/τ) / Σ_{u' ∈ negatives ∪ {u}} exp(φ(e_u^k, e_u'^k')/τ) )`.
///
/// A negative equal to the anchor is masked out so the denominator is a set
/// union. `target_table` and `aux_table` are full `users × d` tables.
pub fn infonce_pair(
    tape: &mut Tape,
    target_table: Var,
    aux_table: Var,
    batch: &ContrastiveBatch,
    similarity: Similarity,
) -> Result<(Var, Var)> {
    let mut anchor = tape.gather(target_table, &batch.anchors)?;
    let mut positive = tape.gather(aux_table, &batch.anchors)?;
    let mut negative = tape.gather(aux_table, &batch.negatives)?;
    if similarity == Similarity::Cosine {
        anchor = tape.normalize_rows(anchor);
        positive = tape.normalize_rows(positive);
        negative = tape.normalize_rows(negative);
    }
    let inv_t = 1.0 / batch.temperature;
    let pos = tape.row_dot(anchor, positive)?;
    let pos = tape.scale(pos, inv_t);
    let neg = tape.matmul_t(anchor, negative)?;
    let neg = tape.scale(neg, inv_t);
    let logits = tape.concat(&[pos, neg])?;
    let width = batch.negatives.len() + 1;
    let mut mask = Vec::with_capacity(batch.anchors.len() * width);
    for &a in &batch.anchors {
        mask.push(true);
        mask.extend(batch.negatives.iter().map(|&n| n != a));
    }
    let lse = tape.logsumexp_rows(logits, Some(mask))?;
    let per_user = tape.sub(lse, pos)?;
    let total = tape.sum(per_user);
    Ok((total, per_user))
}

/// One InfoNCE pair per auxiliary behavior, all sharing `batch`.
/// Returns nothing (with a warning) when there is a single behavior.
pub fn all_pairs_losses(
    tape: &mut Tape,
    enc: &EncoderOutput,
    target: usize,
    batch: &ContrastiveBatch,
    similarity: Similarity,
) -> Result<Vec<PairLoss>> {
    let k_count = enc.user_behavior.len();
    if target >= k_count {
        return Err(CmlError::Contract(format!("target behavior {target} out of range")));
    }
    if k_count < 2 {
        warn!("single behavior: contrastive learning disabled");
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(k_count - 1);
    for aux in (0..k_count).filter(|&k| k != target) {
        let (total, per_user) = infonce_pair(
            tape,
            enc.user_behavior[target],
            enc.user_behavior[aux],
            batch,
            similarity,
        )?;
        out.push(PairLoss {
            auxiliary: aux,
            total,
            per_user,
        });
    }
    Ok(out)
}
