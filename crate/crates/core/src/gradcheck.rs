//! Central-difference checks of reverse- and forward-mode derivatives.
//!
//! A check builds a function of some input tensors on a fresh tape. Non-scalar
//! outputs are reduced with a fixed random projection `Σ P ⊙ out`. Every input
//! entry is perturbed by `±h` and the relative error
//! `|analytic − numeric| / max(1, |numeric|)` is compared against the tolerance.
//! The forward sweep is checked the same way along one random direction.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Similarity, TrainConfig};
use crate::contrastive::ContrastiveBatch;
use crate::data::Interaction;
use crate::error::Result;
use crate::graph::BehaviorGraph;
use crate::model::{MetaParams, MetaVars, ModelParams, ModelVars, Parameters};
use crate::sparse::SparseMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::{build_objective, hypergradient, lookahead_meta_loss, Batch, BprSample, ObjectiveOptions, Weighting};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub entries: usize,
    /// Largest error of the reverse sweep.
    pub max_rel_err: f64,
    /// Error of the forward sweep along a random direction.
    pub jvp_rel_err: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results
            .iter()
            .map(|r| r.max_rel_err.max(r.jvp_rel_err.unwrap_or(0.0)))
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Entries with magnitude in `[0.1, 1)` and random sign, away from kinks at 0.
pub fn away_from_zero<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

fn projected(out: &Tensor, proj: &Tensor) -> f64 {
    out.dot(proj)
}

/// Checks `build` at `inputs`. `build` must be deterministic.
pub fn check<F>(name: &str, seed: u64, inputs: &[Tensor], build: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval = |xs: &[Tensor]| -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let [r, c] = tape.shape(out);
    let proj = uniform(r, c, -1.0, 1.0, &mut rng);
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;

    let mut max_err: f64 = 0.0;
    let mut entries = 0;
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (idx, &v) in vars.iter().enumerate() {
        let g = grads.wrt(v);
        for j in 0..inputs[idx].len() {
            let orig = xs[idx].data()[j];
            xs[idx].data_mut()[j] = orig + STEP;
            let up = projected(&eval(&xs)?, &proj);
            xs[idx].data_mut()[j] = orig - STEP;
            let down = projected(&eval(&xs)?, &proj);
            xs[idx].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            max_err = max_err.max(rel_err(g.data()[j], numeric));
            entries += 1;
        }
    }

    let direction: Vec<Tensor> = inputs
        .iter()
        .map(|x| uniform(x.rows(), x.cols(), -1.0, 1.0, &mut rng))
        .collect();
    let seeds: Vec<(Var, Tensor)> = vars.iter().copied().zip(direction.iter().cloned()).collect();
    let tangent = tape.jvp(&seeds)?.wrt(out);
    let shifted = |c: f64| -> Result<f64> {
        let xs: Vec<Tensor> = inputs
            .iter()
            .zip(&direction)
            .map(|(x, d)| x.zip_map(d, |a, b| a + c * b))
            .collect();
        Ok(projected(&eval(&xs)?, &proj))
    };
    let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
    let jvp_err = rel_err(projected(&tangent, &proj), numeric);

    let passed = max_err.is_finite() && max_err < TOLERANCE && jvp_err < TOLERANCE;
    Ok(CheckResult {
        name: name.to_string(),
        seed,
        entries,
        max_rel_err: max_err,
        jvp_rel_err: Some(jvp_err),
        passed,
    })
}

/// Sizes of the toy problems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySize {
    pub users: usize,
    pub items: usize,
    pub dim: usize,
}

impl Default for ToySize {
    fn default() -> Self {
        Self {
            users: 6,
            items: 7,
            dim: 4,
        }
    }
}

fn random_sparse<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Arc<SparseMatrix> {
    let mut entries = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if rng.gen::<f64>() < 0.4 {
                entries.push((r, c, rng.gen_range(0.1..1.0)));
            }
        }
    }
    Arc::new(SparseMatrix::from_triplets(rows, cols, &entries).expect("valid triplets"))
}

/// One check per differentiable primitive.
pub fn primitive_checks(seed: u64, size: ToySize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, d) = (size.users, size.items, size.dim);
    let a = uniform(n, d, -1.0, 1.0, &mut rng);
    let b = uniform(n, d, -1.0, 1.0, &mut rng);
    let w = uniform(d, m, -1.0, 1.0, &mut rng);
    let wt = uniform(m, d, -1.0, 1.0, &mut rng);
    let row = uniform(1, d, -1.0, 1.0, &mut rng);
    let col = uniform(n, 1, -1.0, 1.0, &mut rng);
    let pos = uniform(n, d, 0.2, 2.0, &mut rng);
    let kinked = away_from_zero(n, d, &mut rng);
    let slope = Tensor::scalar(rng.gen_range(0.05..0.5));
    let scalar = Tensor::scalar(rng.gen_range(-1.0..1.0));
    let s = random_sparse(m, n, &mut rng);
    let idx: Vec<usize> = (0..n + 3).map(|_| rng.gen_range(0..n)).collect();
    let mask: Vec<bool> = (0..n * d).map(|j| j % d == 0 || rng.gen::<f64>() < 0.6).collect();
    let drop_seed: u64 = rng.gen();
    let c = rng.gen_range(-2.0..2.0);

    let mut out = Vec::new();
    macro_rules! chk {
        ($name:expr, [$($x:expr),*], $f:expr) => {
            let inputs = vec![$($x.clone()),*];
            out.push(check($name, seed, &inputs, $f)?);
        };
    }
    chk!("matmul", [a, w], |t, v| t.matmul(v[0], v[1]));
    chk!("matmul_t", [a, wt], |t, v| t.matmul_t(v[0], v[1]));
    chk!("spmm", [a], |t, v| t.spmm(&s, v[0]));
    chk!("transpose", [a], |t, v| Ok(t.transpose(v[0])));
    chk!("add", [a, b], |t, v| t.add(v[0], v[1]));
    chk!("sub", [a, b], |t, v| t.sub(v[0], v[1]));
    chk!("mul", [a, b], |t, v| t.mul(v[0], v[1]));
    chk!("scale", [a], |t, v| Ok(t.scale(v[0], c)));
    chk!("add_row", [a, row], |t, v| t.add_row(v[0], v[1]));
    chk!("mul_col", [a, col], |t, v| t.mul_col(v[0], v[1]));
    chk!("repeat_cols", [col], |t, v| t.repeat_cols(v[0], d));
    chk!("prelu", [kinked, slope], |t, v| t.prelu(v[0], v[1]));
    chk!("concat", [a, col, b], |t, v| t.concat(&[v[0], v[1], v[2]]));
    chk!("exp", [a], |t, v| Ok(t.exp(v[0])));
    chk!("log", [pos], |t, v| Ok(t.log(v[0])));
    chk!("sigmoid", [a], |t, v| Ok(t.sigmoid(v[0])));
    chk!("log_sigmoid", [a], |t, v| Ok(t.log_sigmoid(v[0])));
    chk!("map", [a], |t, v| Ok(t.map(v[0], f64::tanh, |x| 1.0 - x.tanh().powi(2))));
    chk!("normalize_rows", [a], |t, v| Ok(t.normalize_rows(v[0])));
    chk!("row_dot", [a, b], |t, v| t.row_dot(v[0], v[1]));
    chk!("cosine", [a, b], |t, v| t.cosine(v[0], v[1]));
    chk!("gather", [a], |t, v| t.gather(v[0], &idx));
    chk!("sum", [a], |t, v| Ok(t.sum(v[0])));
    chk!("mean", [a], |t, v| Ok(t.mean(v[0])));
    chk!("sum_cols", [a], |t, v| Ok(t.sum_cols(v[0])));
    chk!("mean_of", [a, b], |t, v| t.mean_of(&[v[0], v[1]]));
    chk!("logsumexp_rows", [a], |t, v| t.logsumexp_rows(v[0], None));
    chk!("logsumexp_rows_masked", [a], |t, v| t.logsumexp_rows(v[0], Some(mask.clone())));
    chk!("dropout", [a], |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
        t.dropout(v[0], 0.3, true, &mut r)
    });
    chk!("scalar_broadcast", [scalar], |t, v| {
        let r = t.repeat_cols(v[0], n)?;
        Ok(t.transpose(r))
    });
    Ok(out)
}

/// A random multi-behavior toy: graph, parameters and one batch.
pub struct CompositeToy {
    pub graph: BehaviorGraph,
    pub model: ModelParams,
    pub meta: MetaParams,
    pub batch: Batch,
    pub meta_batch: Vec<BprSample>,
    pub target: usize,
}

impl CompositeToy {
    pub fn new(seed: u64, size: ToySize, behaviors: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nu, ni) = (size.users, size.items);
        let mut triples = Vec::new();
        for k in 0..behaviors {
            for u in 0..nu {
                for i in 0..ni {
                    if rng.gen::<f64>() < 0.35 {
                        triples.push(Interaction::new(u, i, k));
                    }
                }
            }
        }
        let graph = BehaviorGraph::from_interactions(nu, ni, behaviors, &triples, true)?;
        let mut model = ModelParams::init(nu, ni, size.dim, 2, &mut rng);
        for t in model.tensors_mut() {
            if t.len() > 1 {
                *t = uniform(t.rows(), t.cols(), -0.8, 0.8, &mut rng);
            }
        }
        let mut meta = MetaParams::init(size.dim, behaviors);
        for t in meta.tensors_mut() {
            *t = if t.len() > 1 {
                uniform(t.rows(), t.cols(), -0.5, 0.5, &mut rng)
            } else {
                Tensor::scalar(rng.gen_range(0.1..0.9))
            };
        }
        let sample = |rng: &mut ChaCha8Rng, k: usize, count: usize| -> Vec<BprSample> {
            (0..count)
                .map(|_| BprSample {
                    user: rng.gen_range(0..nu),
                    pos: rng.gen_range(0..ni),
                    neg: rng.gen_range(0..ni),
                    behavior: k,
                })
                .collect()
        };
        let target = 0;
        let mut bpr = vec![sample(&mut rng, target, 5)];
        if behaviors > 1 {
            bpr.push(sample(&mut rng, 1, 3));
        }
        let mut anchors: Vec<usize> = (0..nu).collect();
        anchors.retain(|_| rng.gen::<f64>() < 0.7);
        if anchors.is_empty() {
            anchors.push(0);
        }
        let contrastive = ContrastiveBatch::sample(anchors, nu, 5, 0.5, &mut rng)?;
        let meta_batch = sample(&mut rng, target, 4);
        Ok(Self {
            graph,
            model,
            meta,
            batch: Batch {
                bpr,
                contrastive: Some(contrastive),
            },
            meta_batch,
            target,
        })
    }
}

fn composite_config(similarity: Similarity, weighting: Weighting) -> TrainConfig {
    let mut cfg = TrainConfig {
        layers: 2,
        temperature: 0.5,
        gamma: 1.5,
        beta: 0.7,
        l2: 1e-2,
        dropout: 0.2,
        similarity,
        ..TrainConfig::default()
    };
    cfg.ablation.mcn = weighting == Weighting::Uniform;
    cfg.ablation.mke = weighting == Weighting::Gates;
    cfg
}

/// The full objective as a function of every graph and meta parameter, with
/// meta-knowledge inputs left attached so gradients flow through them too.
pub fn composite_checks(seed: u64, size: ToySize) -> Result<Vec<CheckResult>> {
    let toy = CompositeToy::new(seed, size, 3)?;
    let n_model = toy.model.tensors().len();
    let mut inputs: Vec<Tensor> = toy.model.tensors().into_iter().cloned().collect();
    inputs.extend(toy.meta.tensors().into_iter().cloned());
    let drop_seed = seed.wrapping_add(17);
    let mut out = Vec::new();
    for (name, sim, weighting, detach) in [
        ("objective_meta_cosine", Similarity::Cosine, Weighting::Meta, false),
        ("objective_meta_dot", Similarity::Dot, Weighting::Meta, false),
        ("objective_gates", Similarity::Cosine, Weighting::Gates, false),
        ("objective_uniform", Similarity::Cosine, Weighting::Uniform, false),
    ] {
        let cfg = composite_config(sim, weighting);
        let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let mv = ModelVars::from_leaves(&vars[..n_model], toy.model.layers());
            let metav = MetaVars::from_leaves(&vars[n_model..], toy.graph.num_behaviors());
            let opts = ObjectiveOptions {
                weighting,
                train: true,
                detach_meta_inputs: detach,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(drop_seed);
            let obj = build_objective(tape, &toy.graph, &mv, Some(&metav), &toy.batch, toy.target, &cfg, opts, &mut rng)?;
            Ok(obj.total)
        };
        out.push(check(name, seed, &inputs, build)?);
    }
    Ok(out)
}

/// Compares the bilevel hypergradient with central differences of the
/// lookahead meta loss in every meta parameter.
pub fn hypergradient_check(seed: u64, size: ToySize) -> Result<CheckResult> {
    let toy = CompositeToy::new(seed, size, 3)?;
    let mut cfg = composite_config(Similarity::Cosine, Weighting::Meta);
    cfg.dropout = 0.0;
    let alpha = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = hypergradient(
        &toy.graph,
        &toy.model,
        &toy.meta,
        &toy.batch,
        &toy.meta_batch,
        toy.target,
        &cfg,
        alpha,
        &mut rng,
    )?;
    let f = |meta: &MetaParams| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        lookahead_meta_loss(&toy.graph, &toy.model, meta, &toy.batch, &toy.meta_batch, toy.target, &cfg, alpha, &mut rng)
    };
    let mut meta = toy.meta.clone();
    let mut max_err: f64 = 0.0;
    let mut entries = 0;
    let sizes: Vec<usize> = meta.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = meta.tensors()[ti].data()[j];
            meta.tensors_mut()[ti].data_mut()[j] = orig + STEP;
            let up = f(&meta)?;
            meta.tensors_mut()[ti].data_mut()[j] = orig - STEP;
            let down = f(&meta)?;
            meta.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            max_err = max_err.max(rel_err(h.grads[ti].data()[j], numeric));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: "bilevel_hypergradient".into(),
        seed,
        entries,
        max_rel_err: max_err,
        jvp_rel_err: None,
        passed: max_err < TOLERANCE,
    })
}

/// A derivative rule that is deliberately wrong; the check must fail.
pub fn injected_fault_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(3, 3, -1.0, 1.0, &mut rng);
    check("injected_fault", seed, &[x], |t, v| {
        Ok(t.map(v[0], f64::sin, |x| 1.5 * x.cos()))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    pub size: ToySize,
    /// Adds a check with a wrong derivative rule.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            size: ToySize::default(),
            inject_fault: false,
        }
    }
}

/// Every primitive, the composite objective and the hypergradient, per seed.
pub fn run_suite(opts: &SuiteOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for &seed in &opts.seeds {
        results.extend(primitive_checks(seed, opts.size)?);
        results.extend(composite_checks(seed, opts.size)?);
        results.push(hypergradient_check(seed, opts.size)?);
    }
    if opts.inject_fault {
        results.push(injected_fault_check(opts.seeds.first().copied().unwrap_or(0))?);
    }
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        step: STEP,
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_on_one_seed() {
        for r in primitive_checks(3, ToySize::default()).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn composite_passes_on_one_seed() {
        for r in composite_checks(1, ToySize::default()).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn hypergradient_matches_differences() {
        let r = hypergradient_check(2, ToySize::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_rule_is_caught() {
        assert!(!injected_fault_check(0).unwrap().passed);
    }
}
