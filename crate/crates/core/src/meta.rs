//! Meta-knowledge encoders and the weighting network.
//!
//! For a per-user loss `ℓ_u`, a context embedding `c_u` (the auxiliary-behavior
//! view for contrastive terms, the positive item for BPR terms) and the user's
//! aggregated embedding `e_u`:
//!
//! ```text
//! Z1 = (γ·ℓ_u repeated d times) ∥ c_u ∥ e_u        (3d wide)
//! Z2 = ℓ_u · (c_u ∥ e_u)                           (2d wide)
//! ω_u = PReLU(Z1·w1 + b1) + PReLU(Z2·w2 + b2)
//! ```

use rand::Rng;

use crate::error::{CmlError, Result};
use crate::model::HeadVars;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct MetaKnowledge {
    pub z1: Var,
    pub z2: Var,
}

/// Builds both meta-knowledge matrices. `loss` is `B × 1`, `context` and
/// `own` are `B × d`.
pub fn encode_meta_knowledge(
    tape: &mut Tape,
    loss: Var,
    context: Var,
    own: Var,
    gamma: f64,
) -> Result<MetaKnowledge> {
    let [b, one] = tape.shape(loss);
    let [bc, d] = tape.shape(context);
    if one != 1 || bc != b || tape.shape(own) != [b, d] {
        return Err(CmlError::Contract(format!(
            "meta-knowledge inputs misaligned: loss {:?}, context {:?}, own {:?}",
            tape.shape(loss),
            tape.shape(context),
            tape.shape(own)
        )));
    }
    let dup = tape.repeat_cols(loss, d)?;
    let dup = tape.scale(dup, gamma);
    let z1 = tape.concat(&[dup, context, own])?;
    let pair = tape.concat(&[context, own])?;
    let z2 = tape.mul_col(pair, loss)?;
    Ok(MetaKnowledge { z1, z2 })
}

fn xi(tape: &mut Tape, z: Var, w: Var, b: Var, slope: Var) -> Result<Var> {
    let lin = tape.matmul(z, w)?;
    let lin = tape.add_row(lin, b)?;
    tape.prelu(lin, slope)
}

/// Per-user weights `ω = ξ1(Z1) + ξ2(Z2)`, `B × 1`. Dropout hits the
/// meta-knowledge rows in training mode only.
pub fn weight<R: Rng + ?Sized>(
    tape: &mut Tape,
    head: &HeadVars,
    z: &MetaKnowledge,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let z1 = tape.dropout(z.z1, dropout, train, rng)?;
    let z2 = tape.dropout(z.z2, dropout, train, rng)?;
    let w1 = xi(tape, z1, head.w1, head.b1, head.slope1)?;
    let w2 = xi(tape, z2, head.w2, head.b2, head.slope2)?;
    tape.add(w1, w2)
}

/// A `B × 1` column with every entry equal to the `1 × 1` gate.
pub fn broadcast_gate(tape: &mut Tape, gate: Var, rows: usize) -> Result<Var> {
    let row = tape.repeat_cols(gate, rows)?;
    Ok(tape.transpose(row))
}

/// A loss vector and its optional per-entry weights (`None` means all ones).
#[derive(Debug, Clone, Copy)]
pub struct WeightedTerm {
    pub losses: Var,
    pub weights: Option<Var>,
}

/// `β · Σ_pairs Σ_u ω·ℓ + Σ_k Σ_samples ω·ℓ + regularizer`.
pub fn weighted_objective(
    tape: &mut Tape,
    contrastive: &[WeightedTerm],
    bpr: &[WeightedTerm],
    beta: f64,
    regularizer: Option<Var>,
) -> Result<Var> {
    let reduce = |tape: &mut Tape, term: &WeightedTerm| -> Result<Var> {
        let v = match term.weights {
            Some(w) => tape.mul(w, term.losses)?,
            None => term.losses,
        };
        Ok(tape.sum(v))
    };
    let mut total: Option<Var> = None;
    let add = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    if !contrastive.is_empty() {
        let mut cl: Option<Var> = None;
        for t in contrastive {
            let s = reduce(tape, t)?;
            add(tape, &mut cl, s)?;
        }
        let cl = tape.scale(cl.expect("non-empty"), beta);
        add(tape, &mut total, cl)?;
    }
    for t in bpr {
        let s = reduce(tape, t)?;
        add(tape, &mut total, s)?;
    }
    if let Some(r) = regularizer {
        add(tape, &mut total, r)?;
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(crate::tensor::Tensor::scalar(0.0))),
    }
}
