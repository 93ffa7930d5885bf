//! Forward pass of the full weighted training objective on one batch.

use rand::Rng;

use crate::config::TrainConfig;
use crate::contrastive::{all_pairs_losses, ContrastiveBatch};
use crate::encoder::{encode, EncoderOutput};
use crate::error::Result;
use crate::graph::BehaviorGraph;
use crate::meta::{broadcast_gate, encode_meta_knowledge, weight, weighted_objective, WeightedTerm};
use crate::model::{MetaVars, ModelVars};
use crate::tape::{Tape, Var};

use super::bpr::{bpr_per_sample, l2_penalty, BprSample};

/// How loss terms are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Every weight is 1.
    Uniform,
    /// Weights from the meta-knowledge network.
    Meta,
    /// One learned scalar per term.
    Gates,
}

impl Weighting {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        if cfg.ablation.mcn {
            Weighting::Uniform
        } else if cfg.ablation.mke {
            Weighting::Gates
        } else {
            Weighting::Meta
        }
    }
}

/// Samples for one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// One BPR term per entry, each holding samples of a single behavior.
    pub bpr: Vec<Vec<BprSample>>,
    /// `None` when the contrastive block is off.
    pub contrastive: Option<ContrastiveBatch>,
}

/// A loss vector on the tape with its weights.
#[derive(Debug, Clone, Copy)]
pub struct Term {
    pub behavior: usize,
    /// `B × 1` per-user or per-sample losses.
    pub losses: Var,
    pub weights: Option<Var>,
    /// Multiplier of this term inside the objective (β for contrastive terms).
    pub coefficient: f64,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub encoder: EncoderOutput,
    pub contrastive: Vec<Term>,
    pub bpr: Vec<Term>,
    pub regularizer: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveOptions {
    pub weighting: Weighting,
    /// Dropout on meta-knowledge is active.
    pub train: bool,
    /// Build the meta-knowledge from stop-gradient copies of losses and embeddings.
    pub detach_meta_inputs: bool,
}

impl Objective {
    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.contrastive.iter().chain(&self.bpr)
    }
}

#[allow(clippy::too_many_arguments)]
fn meta_weights<R: Rng + ?Sized>(
    tape: &mut Tape,
    head: &crate::model::HeadVars,
    losses: Var,
    context: Var,
    own: Var,
    cfg: &TrainConfig,
    opts: &ObjectiveOptions,
    rng: &mut R,
) -> Result<Var> {
    let (losses, context, own) = if opts.detach_meta_inputs {
        (tape.detach(losses), tape.detach(context), tape.detach(own))
    } else {
        (losses, context, own)
    };
    let z = encode_meta_knowledge(tape, losses, context, own, cfg.gamma)?;
    weight(tape, head, &z, cfg.dropout, opts.train, rng)
}

/// Encodes, computes every contrastive pair and BPR term, weights them and
/// adds `λ‖Θ_G‖²`.
#[allow(clippy::too_many_arguments)]
pub fn build_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    graph: &BehaviorGraph,
    model: &ModelVars,
    meta: Option<&MetaVars>,
    batch: &Batch,
    target: usize,
    cfg: &TrainConfig,
    opts: ObjectiveOptions,
    rng: &mut R,
) -> Result<Objective> {
    let enc = encode(tape, graph, model)?;
    let weighting = if meta.is_some() { opts.weighting } else { Weighting::Uniform };

    let mut contrastive = Vec::new();
    if let (false, Some(cb)) = (cfg.ablation.clf, &batch.contrastive) {
        let pairs = all_pairs_losses(tape, &enc, target, cb, cfg.similarity)?;
        let own = if weighting == Weighting::Meta {
            Some(tape.gather(enc.user_final, &cb.anchors)?)
        } else {
            None
        };
        for p in pairs {
            let weights = match (weighting, meta) {
                (Weighting::Meta, Some(m)) => {
                    let ctx = tape.gather(enc.user_behavior[p.auxiliary], &cb.anchors)?;
                    let own = own.expect("gathered for meta weighting");
                    Some(meta_weights(tape, &m.contrastive, p.per_user, ctx, own, cfg, &opts, rng)?)
                }
                (Weighting::Gates, Some(m)) => {
                    Some(broadcast_gate(tape, m.contrastive_gates[p.auxiliary], cb.anchors.len())?)
                }
                _ => None,
            };
            contrastive.push(Term {
                behavior: p.auxiliary,
                losses: p.per_user,
                weights,
                coefficient: cfg.beta,
            });
        }
    }

    let mut bpr = Vec::with_capacity(batch.bpr.len());
    for samples in &batch.bpr {
        let behavior = samples.first().map_or(target, |s| s.behavior);
        let per = bpr_per_sample(tape, enc.user_final, enc.item_final, samples)?;
        let weights = match (weighting, meta) {
            (Weighting::Meta, Some(m)) => {
                let users: Vec<usize> = samples.iter().map(|s| s.user).collect();
                let pos: Vec<usize> = samples.iter().map(|s| s.pos).collect();
                let ctx = tape.gather(enc.item_final, &pos)?;
                let own = tape.gather(enc.user_final, &users)?;
                Some(meta_weights(tape, &m.bpr, per, ctx, own, cfg, &opts, rng)?)
            }
            (Weighting::Gates, Some(m)) => {
                Some(broadcast_gate(tape, m.bpr_gates[behavior], samples.len())?)
            }
            _ => None,
        };
        bpr.push(Term {
            behavior,
            losses: per,
            weights,
            coefficient: 1.0,
        });
    }

    let regularizer = if cfg.l2 > 0.0 {
        Some(l2_penalty(tape, &model.leaves(), cfg.l2)?)
    } else {
        None
    };
    let wt = |t: &Term| WeightedTerm {
        losses: t.losses,
        weights: t.weights,
    };
    let cl_terms: Vec<WeightedTerm> = contrastive.iter().map(wt).collect();
    let bpr_terms: Vec<WeightedTerm> = bpr.iter().map(wt).collect();
    let total = weighted_objective(tape, &cl_terms, &bpr_terms, cfg.beta, regularizer)?;
    Ok(Objective {
        total,
        encoder: enc,
        contrastive,
        bpr,
        regularizer,
    })
}
