//! Bilevel training loop.
//!
//! Each iteration:
//! 1. builds the weighted objective on a train batch with the current meta
//!    parameters and takes one SGD lookahead step on a copy of the graph model;
//! 2. scores the copy with plain BPR on a meta batch and propagates that loss
//!    back through the lookahead step into the meta parameters, which take an
//!    AdamW step;
//! 3. rebuilds the weighted objective with the updated meta parameters and
//!    takes an AdamW step on the graph model.
//!
//! With uniform weights steps 1 and 2 are skipped.

pub mod bpr;
pub mod objective;
pub mod optim;

use std::collections::BTreeMap;

use log::{debug, error, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::contrastive::ContrastiveBatch;
use crate::data::SplitAssignment;
use crate::encoder::{encode, EmbeddingState};
use crate::error::{CmlError, Result};
use crate::eval::{evaluate_with, KnownItems, MetricReport, Protocol};
use crate::graph::BehaviorGraph;
use crate::model::{MetaParams, ModelParams, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use bpr::{bpr_loss, bpr_per_sample, l2_penalty, score, BprSample, BprSampler};
pub use objective::{build_objective, Batch, Objective, ObjectiveOptions, Term, Weighting};
pub use optim::{AdamW, CyclicLr};

/// Cutoff used for validation and early stopping.
pub const VALIDATION_K: usize = 10;

/// Everything the trainer reads from a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub num_users: usize,
    pub num_items: usize,
    pub behaviors: Vec<String>,
    pub target: usize,
    pub split: SplitAssignment,
}

impl TrainingData {
    pub fn num_behaviors(&self) -> usize {
        self.behaviors.len()
    }

    /// Graph over train and meta interactions.
    pub fn graph(&self, normalize: bool) -> Result<BehaviorGraph> {
        BehaviorGraph::from_interactions(
            self.num_users,
            self.num_items,
            self.num_behaviors(),
            self.split.observed(),
            normalize,
        )
    }

    /// The last meta-split target item of every user that has one.
    pub fn validation(&self) -> BTreeMap<usize, usize> {
        self.split
            .meta
            .iter()
            .filter(|t| t.behavior == self.target)
            .map(|t| (t.user, t.item))
            .collect()
    }

    pub fn auxiliaries(&self) -> Vec<usize> {
        (0..self.num_behaviors()).filter(|&k| k != self.target).collect()
    }

    pub fn pair_label(&self, auxiliary: usize) -> String {
        format!("{}/{}", self.behaviors[self.target], self.behaviors[auxiliary])
    }
}

/// Means over one step or one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    /// Mean per-sample BPR loss, summed over BPR terms.
    pub l_bpr: f64,
    /// Mean per-user InfoNCE loss, one entry per auxiliary behavior.
    pub l_cl: Vec<f64>,
    /// Mean contrastive weight, one entry per auxiliary behavior.
    pub omega: Vec<f64>,
    pub omega_bpr: f64,
    pub meta_loss: Option<f64>,
    pub lr: f64,
}

impl StepStats {
    fn accumulate(&mut self, other: &StepStats) {
        self.loss += other.loss;
        self.l_bpr += other.l_bpr;
        self.omega_bpr += other.omega_bpr;
        if self.l_cl.is_empty() {
            self.l_cl = vec![0.0; other.l_cl.len()];
            self.omega = vec![0.0; other.omega.len()];
        }
        for (a, b) in self.l_cl.iter_mut().zip(&other.l_cl) {
            *a += b;
        }
        for (a, b) in self.omega.iter_mut().zip(&other.omega) {
            *a += b;
        }
        if let Some(m) = other.meta_loss {
            *self.meta_loss.get_or_insert(0.0) += m;
        }
        self.lr = other.lr;
    }

    fn scaled(mut self, n: usize) -> Self {
        let c = 1.0 / n.max(1) as f64;
        self.loss *= c;
        self.l_bpr *= c;
        self.omega_bpr *= c;
        self.l_cl.iter_mut().for_each(|v| *v *= c);
        self.omega.iter_mut().for_each(|v| *v *= c);
        if let Some(m) = self.meta_loss.as_mut() {
            *m *= c;
        }
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub iterations: usize,
    pub mean: StepStats,
    pub diverged: bool,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    pub loss: f64,
    pub l_bpr: f64,
    pub l_cl: BTreeMap<String, f64>,
    pub omega: BTreeMap<String, f64>,
    pub omega_bpr: f64,
    pub meta_loss: Option<f64>,
    pub lr: f64,
    pub hr10: Option<f64>,
    pub ndcg10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_hr10: Option<f64>,
    pub stopped_early: bool,
    pub diverged: bool,
}

fn mean(t: &Tensor) -> f64 {
    t.sum() / t.len().max(1) as f64
}

fn term_stats(tape: &Tape, obj: &Objective, lr: f64) -> StepStats {
    let weight_mean = |t: &Term| t.weights.map_or(1.0, |w| mean(tape.value(w)));
    let n_bpr = obj.bpr.len().max(1) as f64;
    StepStats {
        loss: tape.value(obj.total).item(),
        l_bpr: obj.bpr.iter().map(|t| mean(tape.value(t.losses))).sum(),
        l_cl: obj.contrastive.iter().map(|t| mean(tape.value(t.losses))).collect(),
        omega: obj.contrastive.iter().map(weight_mean).collect(),
        omega_bpr: obj.bpr.iter().map(weight_mean).sum::<f64>() / n_bpr,
        meta_loss: None,
        lr,
    }
}

/// Mean plain BPR loss of `model` on `meta_batch`.
pub fn meta_loss(graph: &BehaviorGraph, model: &ModelParams, meta_batch: &[BprSample]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register_frozen(&mut tape);
    let enc = encode(&mut tape, graph, &vars)?;
    let per = bpr_per_sample(&mut tape, enc.user_final, enc.item_final, meta_batch)?;
    Ok(mean(tape.value(per)))
}

/// Gradient of the training objective with respect to the graph model,
/// with the meta parameters held fixed.
#[allow(clippy::too_many_arguments)]
pub fn model_gradient<R: Rng + ?Sized>(
    graph: &BehaviorGraph,
    model: &ModelParams,
    meta: &MetaParams,
    batch: &Batch,
    target: usize,
    cfg: &TrainConfig,
    train: bool,
    rng: &mut R,
) -> Result<(Vec<Tensor>, f64)> {
    let mut tape = Tape::new();
    let mv = model.register(&mut tape);
    let metav = meta.register_frozen(&mut tape);
    let opts = ObjectiveOptions {
        weighting: Weighting::from_config(cfg),
        train,
        detach_meta_inputs: true,
    };
    let obj = build_objective(&mut tape, graph, &mv, Some(&metav), batch, target, cfg, opts, rng)?;
    let grads = tape.backward(obj.total)?;
    Ok((mv.leaves().iter().map(|&v| grads.wrt(v)).collect(), tape.value(obj.total).item()))
}

/// Meta-batch loss after one SGD lookahead step of size `alpha`.
#[allow(clippy::too_many_arguments)]
pub fn lookahead_meta_loss<R: Rng + ?Sized>(
    graph: &BehaviorGraph,
    model: &ModelParams,
    meta: &MetaParams,
    batch: &Batch,
    meta_batch: &[BprSample],
    target: usize,
    cfg: &TrainConfig,
    alpha: f64,
    rng: &mut R,
) -> Result<f64> {
    let (grads, _) = model_gradient(graph, model, meta, batch, target, cfg, true, rng)?;
    let mut lookahead = model.clone();
    lookahead.axpy(-alpha, &grads);
    meta_loss(graph, &lookahead, meta_batch)
}

/// Result of the first two phases.
#[derive(Debug, Clone)]
pub struct Hypergradient {
    /// `∂ L_meta(Θ − α∇L_train) / ∂Θ_M` in [`Parameters::tensors`] order.
    pub grads: Vec<Tensor>,
    pub meta_loss: f64,
    pub stats: StepStats,
    /// Mean `∂L_meta/∂ω` over the entries of each weighted term, contrastive
    /// terms first.
    pub weight_sensitivity: Vec<f64>,
}

/// Exact hypergradient of the lookahead meta loss.
///
/// With `v = ∇L_meta(Θ')` and `Θ' = Θ − α ∇_Θ Σ c·ω_u·ℓ_u`, the derivative of the
/// meta loss with respect to `ω_u` is `−α·c·⟨∇ℓ_u, v⟩`, obtained for every `u`
/// at once by a forward-mode pass along `v`. Those values seed a reverse pass
/// from the weight nodes into the meta parameters.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient<R: Rng + ?Sized>(
    graph: &BehaviorGraph,
    model: &ModelParams,
    meta: &MetaParams,
    batch: &Batch,
    meta_batch: &[BprSample],
    target: usize,
    cfg: &TrainConfig,
    alpha: f64,
    rng: &mut R,
) -> Result<Hypergradient> {
    let mut t1 = Tape::new();
    let mv = model.register(&mut t1);
    let metav = meta.register(&mut t1);
    let opts = ObjectiveOptions {
        weighting: Weighting::from_config(cfg),
        train: true,
        detach_meta_inputs: true,
    };
    let obj = build_objective(&mut t1, graph, &mv, Some(&metav), batch, target, cfg, opts, rng)?;
    let loss = t1.value(obj.total).item();
    if !loss.is_finite() {
        return Err(CmlError::Numerical(format!("training loss is {loss} in the lookahead phase")));
    }
    let stats = term_stats(&t1, &obj, alpha);
    let g1 = t1.backward(obj.total)?;
    let leaves = mv.leaves();
    let grads: Vec<Tensor> = leaves.iter().map(|&v| g1.wrt(v)).collect();
    let mut lookahead = model.clone();
    lookahead.axpy(-alpha, &grads);

    let mut t2 = Tape::new();
    let lv = lookahead.register(&mut t2);
    let enc = encode(&mut t2, graph, &lv)?;
    let per = bpr_per_sample(&mut t2, enc.user_final, enc.item_final, meta_batch)?;
    let ml = t2.mean(per);
    let meta_loss = t2.value(ml).item();
    let g2 = t2.backward(ml)?;
    let direction: Vec<(Var, Tensor)> = leaves
        .iter()
        .zip(lv.leaves())
        .map(|(&l1, l2)| (l1, g2.wrt(l2)))
        .collect();

    let tangents = t1.jvp(&direction)?;
    let seeds: Vec<(Var, Tensor)> = obj
        .terms()
        .filter_map(|t| {
            t.weights
                .map(|w| (w, tangents.wrt(t.losses).scale(-alpha * t.coefficient)))
        })
        .collect();
    let weight_sensitivity = seeds.iter().map(|(_, h)| mean(h)).collect();
    let meta_leaves = metav.leaves();
    let grads = if seeds.is_empty() {
        meta.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
    } else {
        let gm = t1.backward_seeded(&seeds)?;
        meta_leaves.iter().map(|&v| gm.wrt(v)).collect()
    };
    Ok(Hypergradient {
        grads,
        meta_loss,
        stats,
        weight_sensitivity,
    })
}

/// Per-user contrastive weights of every auxiliary pair, in evaluation mode.
/// Rows are `(user, auxiliary behavior, weight)`.
pub fn user_pair_weights(
    graph: &BehaviorGraph,
    model: &ModelParams,
    meta: &MetaParams,
    target: usize,
    cfg: &TrainConfig,
) -> Result<Vec<(usize, usize, f64)>> {
    const CHUNK: usize = 4096;
    if cfg.ablation.clf || graph.num_behaviors() < 2 {
        warn!("no contrastive pairs: nothing to weight");
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = ObjectiveOptions {
        weighting: Weighting::from_config(cfg),
        train: false,
        detach_meta_inputs: true,
    };
    let users: Vec<usize> = (0..graph.num_users).collect();
    let mut rows = Vec::with_capacity(users.len() * (graph.num_behaviors() - 1));
    for chunk in users.chunks(CHUNK) {
        let cb = ContrastiveBatch::sample(
            chunk.to_vec(),
            graph.num_users,
            cfg.negative_samples,
            cfg.temperature,
            &mut rng,
        )?;
        let batch = Batch {
            bpr: Vec::new(),
            contrastive: Some(cb),
        };
        let mut tape = Tape::new();
        let mv = model.register_frozen(&mut tape);
        let metav = meta.register_frozen(&mut tape);
        let obj = build_objective(&mut tape, graph, &mv, Some(&metav), &batch, target, cfg, opts, &mut rng)?;
        for term in &obj.contrastive {
            let w = term.weights.map(|w| tape.value(w).clone());
            for (r, &u) in chunk.iter().enumerate() {
                rows.push((u, term.behavior, w.as_ref().map_or(1.0, |w| w.get(r, 0))));
            }
        }
    }
    rows.sort_by_key(|&(u, k, _)| (u, k));
    Ok(rows)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub graph: BehaviorGraph,
    pub target: usize,
    pub model: ModelParams,
    pub meta: MetaParams,
    pub model_opt: AdamW,
    pub meta_opt: AdamW,
    pub schedule: CyclicLr,
    pub iteration: usize,
    pub epoch: usize,
    weighting: Weighting,
    pair_labels: Vec<String>,
    samplers: Vec<BprSampler>,
    meta_sampler: BprSampler,
    validation: BTreeMap<usize, usize>,
    known: KnownItems,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &TrainingData) -> Result<Self> {
        config.validate()?;
        if data.target >= data.num_behaviors() {
            return Err(CmlError::Data(format!("target behavior {} out of range", data.target)));
        }
        data.split.check_no_leakage(data.target)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ModelParams::init(data.num_users, data.num_items, config.dim, config.layers, &mut rng);
        let meta = MetaParams::init(config.dim, data.num_behaviors());
        let graph = data.graph(config.normalize)?;

        let (nu, ni) = (data.num_users, data.num_items);
        let mut samplers = vec![BprSampler::new(
            data.target,
            nu,
            ni,
            &data.split.train,
            data.split.observed(),
        )?];
        if config.bpr_all_behaviors {
            for k in data.auxiliaries() {
                match BprSampler::new(k, nu, ni, &data.split.train, data.split.observed()) {
                    Ok(s) => samplers.push(s),
                    Err(e) => warn!("behavior `{}` left out of BPR: {e}", data.behaviors[k]),
                }
            }
        }
        let meta_sampler = match BprSampler::new(data.target, nu, ni, &data.split.meta, data.split.observed()) {
            Ok(s) => s,
            Err(_) => {
                warn!("meta split has no target interactions; the meta batch is drawn from train");
                samplers[0].clone()
            }
        };
        let validation = data.validation();
        if validation.is_empty() {
            warn!("no validation users: early stopping is disabled");
        }
        let known = KnownItems::from_split(&data.split, nu, data.target);
        let auxiliaries = if config.ablation.clf { Vec::new() } else { data.auxiliaries() };
        if data.num_behaviors() < 2 && !config.ablation.clf {
            warn!("single behavior: contrastive learning disabled");
        }
        let pair_labels = auxiliaries.iter().map(|&k| data.pair_label(k)).collect();
        let model_opt = AdamW::new(&model, config.weight_decay);
        let meta_opt = AdamW::new(&meta, 0.0);
        let schedule = CyclicLr::new(config.base_lr, config.max_lr, config.lr_half_cycle);
        Ok(Self {
            weighting: Weighting::from_config(&config),
            config,
            graph,
            target: data.target,
            model,
            meta,
            model_opt,
            meta_opt,
            schedule,
            iteration: 0,
            epoch: 0,
            pair_labels,
            samplers,
            meta_sampler,
            validation,
            known,
            rng,
        })
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn pair_labels(&self) -> &[String] {
        &self.pair_labels
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.samplers[0].pool_size().div_ceil(self.config.train_batch).max(1)
    }

    pub fn sample_batch(&mut self) -> Result<Batch> {
        let bpr: Vec<Vec<BprSample>> = self
            .samplers
            .iter()
            .map(|s| s.sample(self.config.train_batch, &mut self.rng))
            .collect();
        let contrastive = if self.config.ablation.clf || self.graph.num_behaviors() < 2 {
            None
        } else {
            let mut seen = vec![false; self.graph.num_users];
            let anchors: Vec<usize> = bpr[0]
                .iter()
                .map(|s| s.user)
                .filter(|&u| !std::mem::replace(&mut seen[u], true))
                .collect();
            Some(ContrastiveBatch::sample(
                anchors,
                self.graph.num_users,
                self.config.negative_samples,
                self.config.temperature,
                &mut self.rng,
            )?)
        };
        Ok(Batch { bpr, contrastive })
    }

    pub fn sample_meta_batch(&mut self) -> Vec<BprSample> {
        self.meta_sampler.sample(self.config.meta_batch, &mut self.rng)
    }

    /// One full iteration. Fails with [`CmlError::Numerical`] without touching
    /// the parameters when a loss is not finite.
    pub fn step(&mut self) -> Result<StepStats> {
        let lr = self.schedule.at(self.iteration);
        let batch = self.sample_batch()?;
        let mut meta_loss = None;
        if self.weighting != Weighting::Uniform {
            let meta_batch = self.sample_meta_batch();
            let alpha = self.config.lookahead_lr.unwrap_or(lr);
            let h = hypergradient(
                &self.graph,
                &self.model,
                &self.meta,
                &batch,
                &meta_batch,
                self.target,
                &self.config,
                alpha,
                &mut self.rng,
            )?;
            if !h.meta_loss.is_finite() || !h.grads.iter().all(Tensor::is_finite) {
                return Err(CmlError::Numerical("meta gradient is not finite".into()));
            }
            self.meta_opt.step(&mut self.meta, &h.grads, self.config.meta_lr);
            meta_loss = Some(h.meta_loss);
        }

        let mut tape = Tape::new();
        let mv = self.model.register(&mut tape);
        let metav = self.meta.register_frozen(&mut tape);
        let opts = ObjectiveOptions {
            weighting: self.weighting,
            train: true,
            detach_meta_inputs: true,
        };
        let obj = build_objective(
            &mut tape,
            &self.graph,
            &mv,
            Some(&metav),
            &batch,
            self.target,
            &self.config,
            opts,
            &mut self.rng,
        )?;
        let mut stats = term_stats(&tape, &obj, lr);
        stats.meta_loss = meta_loss;
        if !stats.loss.is_finite() {
            return Err(CmlError::Numerical(format!("training loss is {}", stats.loss)));
        }
        let grads = tape.backward(obj.total)?;
        let g: Vec<Tensor> = mv.leaves().iter().map(|&v| grads.wrt(v)).collect();
        if !g.iter().all(Tensor::is_finite) {
            return Err(CmlError::Numerical("model gradient is not finite".into()));
        }
        self.model_opt.step(&mut self.model, &g, lr);
        self.iteration += 1;
        Ok(stats)
    }

    /// Runs one epoch; stops early and flags divergence on a non-finite loss.
    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let n = self.iterations_per_epoch();
        let mut sum = StepStats::default();
        let mut done = 0;
        let mut diverged = false;
        for _ in 0..n {
            match self.step() {
                Ok(s) => {
                    sum.accumulate(&s);
                    done += 1;
                }
                Err(CmlError::Numerical(msg)) => {
                    error!("epoch {} diverged after {done} iterations: {msg}", self.epoch + 1);
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        self.epoch += 1;
        Ok(EpochStats {
            iterations: done,
            mean: sum.scaled(done),
            diverged,
        })
    }

    pub fn embedding_state(&self) -> Result<EmbeddingState> {
        EmbeddingState::compute(&self.graph, &self.model)
    }

    /// HR@10 and NDCG@10 on the validation items.
    pub fn validate(&self) -> Result<Option<MetricReport>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let state = self.embedding_state()?;
        let protocol = if self.config.full_rank {
            Protocol::FullRank
        } else {
            Protocol::Sampled {
                negatives: self.config.eval_negatives,
            }
        };
        Ok(Some(evaluate_with(
            &self.validation,
            &self.known,
            state.num_users(),
            state.num_items(),
            protocol,
            VALIDATION_K,
            self.config.seed,
            |u, i| {
                state
                    .user_final
                    .row(u)
                    .iter()
                    .zip(state.item_final.row(i))
                    .map(|(a, b)| a * b)
                    .sum()
            },
        )))
    }

    fn record(&self, stats: &EpochStats, report: Option<&MetricReport>) -> EpochRecord {
        let label = |v: &[f64]| -> BTreeMap<String, f64> {
            self.pair_labels.iter().cloned().zip(v.iter().copied()).collect()
        };
        EpochRecord {
            epoch: self.epoch,
            iterations: stats.iterations,
            loss: stats.mean.loss,
            l_bpr: stats.mean.l_bpr,
            l_cl: label(&stats.mean.l_cl),
            omega: label(&stats.mean.omega),
            omega_bpr: stats.mean.omega_bpr,
            meta_loss: stats.mean.meta_loss,
            lr: stats.mean.lr,
            hr10: report.map(|r| r.hr),
            ndcg10: report.map(|r| r.ndcg),
        }
    }

    /// Trains up to `epochs`, stopping after `patience` epochs without a better
    /// validation HR@10, and restores the best parameters.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<FitReport> {
        let mut records = Vec::new();
        let mut best: Option<(f64, usize, ModelParams, MetaParams)> = None;
        let mut stopped_early = false;
        let mut diverged = false;
        while self.epoch < self.config.epochs {
            let stats = self.train_epoch()?;
            let due = self.epoch.is_multiple_of(self.config.eval_every) || self.epoch == self.config.epochs;
            let report = if due && !stats.diverged {
                self.validate()?
            } else {
                None
            };
            let record = self.record(&stats, report.as_ref());
            info!(
                "epoch {} loss {:.5} bpr {:.5} hr@10 {}",
                record.epoch,
                record.loss,
                record.l_bpr,
                record.hr10.map_or("-".into(), |v| format!("{v:.4}"))
            );
            on_epoch(&record);
            records.push(record);
            if stats.diverged {
                diverged = true;
                break;
            }
            if let Some(r) = &report {
                if best.as_ref().is_none_or(|b| r.hr > b.0) {
                    best = Some((r.hr, self.epoch, self.model.clone(), self.meta.clone()));
                }
            }
            if let Some((_, at, _, _)) = &best {
                if self.epoch - at >= self.config.patience {
                    debug!("no improvement for {} epochs", self.config.patience);
                    stopped_early = true;
                    break;
                }
            }
        }
        let (best_hr10, best_epoch) = match best {
            Some((hr, epoch, model, meta)) => {
                self.model = model;
                self.meta = meta;
                (Some(hr), Some(epoch))
            }
            None => (None, None),
        };
        Ok(FitReport {
            records,
            best_epoch,
            best_hr10,
            stopped_early,
            diverged,
        })
    }
}
