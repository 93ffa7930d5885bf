//! Acceptance criteria, one `PASS`/`FAIL` line each.
//!
//! The Retailrocket criteria need the dataset as a triple TSV
//! (`user<TAB>item<TAB>behavior[<TAB>timestamp]` with behaviors `view`,
//! `addtocart`, `transaction`) at `$CML_RETAILROCKET_TSV`; without it they fail.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cml_core::contrastive::{infonce_pair, ContrastiveBatch};
use cml_core::eval::hit_and_ndcg;
use cml_core::gradcheck::{run_suite, SuiteOptions};
use cml_core::meta::{encode_meta_knowledge, weight, weighted_objective, WeightedTerm};
use cml_core::model::MetaParams;
use cml_core::pipeline::{self, PrepareOptions};
use cml_core::synthetic::{clean_noisy_config, generate, run_clean_noisy, SyntheticConfig};
use cml_core::trainer::{bpr_per_sample, BprSample};
use cml_core::{Ablation, InputFormat, Protocol, Similarity, SplitOptions, Tape, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const ORACLE_TOL: f64 = 1e-10;
const CLOSED_FORM_TOL: f64 = 1e-12;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn prelu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn gradient_suite() -> Outcome {
    let opts = SuiteOptions::default();
    let size = opts.size;
    if size.users > 10 || size.items > 10 || size.dim > 8 {
        return Err(format!("toy shape {size:?} exceeds 10 entities or d 8"));
    }
    let report = run_suite(&opts).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} checks over {} seeds, max rel err {:.2e}, {:.2}s",
        report.results.len(),
        opts.seeds.len(),
        report.max_rel_err(),
        report.seconds
    );
    let has_composite = report.results.iter().any(|r| r.name.starts_with("objective"));
    if !has_composite {
        return Err(format!("no composite objective check; {detail}"));
    }
    if report.passed() && report.max_rel_err() < 1e-4 && report.seconds < 30.0 {
        Ok(detail)
    } else {
        let failed: Vec<String> = report.failures().map(|f| format!("{}@{}", f.name, f.seed)).collect();
        Err(format!("failures {failed:?}; {detail}"))
    }
}

fn infonce_error(similarity: Similarity, rng: &mut ChaCha8Rng) -> f64 {
    let (users, d, tau) = (4, 2, 0.5);
    let target = random(users, d, rng);
    let aux = random(users, d, rng);
    let sim = |a: &[f64], b: &[f64]| match similarity {
        Similarity::Cosine => cosine(a, b),
        Similarity::Dot => dot(a, b),
    };
    let mut tape = Tape::new();
    let t = tape.constant(target.clone());
    let a = tape.constant(aux.clone());
    let batch = ContrastiveBatch::new((0..users).collect(), (0..users).collect(), tau).unwrap();
    let (total, per_user) = infonce_pair(&mut tape, t, a, &batch, similarity).unwrap();
    let mut err: f64 = 0.0;
    let mut expected_total = 0.0;
    for u in 0..users {
        let denom: f64 = (0..users).map(|v| (sim(target.row(u), aux.row(v)) / tau).exp()).sum();
        let num = (sim(target.row(u), aux.row(u)) / tau).exp();
        let l = -(num / denom).ln();
        expected_total += l;
        err = err.max((tape.value(per_user).get(u, 0) - l).abs());
    }
    err.max((tape.value(total).item() - expected_total).abs())
}

fn bpr_error(rng: &mut ChaCha8Rng) -> f64 {
    let (users, items, d) = (5, 8, 3);
    let ut = random(users, d, rng);
    let it = random(items, d, rng);
    let samples: Vec<BprSample> = (0..10)
        .map(|_| BprSample {
            user: rng.gen_range(0..users),
            pos: rng.gen_range(0..items),
            neg: rng.gen_range(0..items),
            behavior: 0,
        })
        .collect();
    let mut tape = Tape::new();
    let u = tape.constant(ut.clone());
    let i = tape.constant(it.clone());
    let out = bpr_per_sample(&mut tape, u, i, &samples).unwrap();
    samples
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let margin = dot(ut.row(s.user), it.row(s.pos)) - dot(ut.row(s.user), it.row(s.neg));
            let l = (1.0 + (-margin).exp()).ln();
            (tape.value(out).get(r, 0) - l).abs()
        })
        .fold(0.0, f64::max)
}

struct MetaCase {
    loss: Tensor,
    context: Tensor,
    own: Tensor,
    gamma: f64,
}

impl MetaCase {
    fn new(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let loss = Tensor::column((0..b).map(|_| rng.gen_range(0.1..3.0)).collect());
        Self {
            loss,
            context: random(b, d, rng),
            own: random(b, d, rng),
            gamma: 10.0,
        }
    }

    fn z1_row(&self, r: usize) -> Vec<f64> {
        let d = self.context.cols();
        let mut row = vec![self.gamma * self.loss.get(r, 0); d];
        row.extend_from_slice(self.context.row(r));
        row.extend_from_slice(self.own.row(r));
        row
    }

    fn z2_row(&self, r: usize) -> Vec<f64> {
        let l = self.loss.get(r, 0);
        self.context.row(r).iter().chain(self.own.row(r)).map(|x| l * x).collect()
    }
}

fn meta_knowledge_error(rng: &mut ChaCha8Rng) -> f64 {
    let case = MetaCase::new(6, 3, rng);
    let mut tape = Tape::new();
    let l = tape.constant(case.loss.clone());
    let c = tape.constant(case.context.clone());
    let o = tape.constant(case.own.clone());
    let z = encode_meta_knowledge(&mut tape, l, c, o, case.gamma).unwrap();
    let mut err: f64 = 0.0;
    for r in 0..6 {
        for (j, v) in case.z1_row(r).iter().enumerate() {
            err = err.max((tape.value(z.z1).get(r, j) - v).abs());
        }
        for (j, v) in case.z2_row(r).iter().enumerate() {
            err = err.max((tape.value(z.z2).get(r, j) - v).abs());
        }
    }
    err
}

fn weighted_objective_error(rng: &mut ChaCha8Rng) -> f64 {
    let (users, d, beta, reg) = (6, 3, 0.7, 0.25);
    let mut meta = MetaParams::init(d, 3);
    for head in [&mut meta.contrastive, &mut meta.bpr] {
        head.w1 = random(3 * d, 1, rng);
        head.w2 = random(2 * d, 1, rng);
        head.b1 = Tensor::scalar(rng.gen_range(-0.5..0.5));
        head.b2 = Tensor::scalar(rng.gen_range(-0.5..0.5));
        head.slope1 = Tensor::scalar(rng.gen_range(0.0..0.5));
        head.slope2 = Tensor::scalar(rng.gen_range(0.0..0.5));
    }
    let cases: Vec<MetaCase> = (0..3).map(|_| MetaCase::new(users, d, rng)).collect();

    let mut tape = Tape::new();
    let mv = meta.register_frozen(&mut tape);
    let mut terms = Vec::new();
    for (n, case) in cases.iter().enumerate() {
        let head = if n < 2 { &mv.contrastive } else { &mv.bpr };
        let l = tape.constant(case.loss.clone());
        let c = tape.constant(case.context.clone());
        let o = tape.constant(case.own.clone());
        let z = encode_meta_knowledge(&mut tape, l, c, o, case.gamma).unwrap();
        let w = weight(&mut tape, head, &z, 0.5, false, rng).unwrap();
        terms.push(WeightedTerm { losses: l, weights: Some(w) });
    }
    let r = tape.constant(Tensor::scalar(reg));
    let total = weighted_objective(&mut tape, &terms[..2], &terms[2..], beta, Some(r)).unwrap();

    let omega = |head: &cml_core::model::WeightHead, case: &MetaCase, r: usize| {
        let a = dot(&case.z1_row(r), head.w1.data()) + head.b1.item();
        let b = dot(&case.z2_row(r), head.w2.data()) + head.b2.item();
        prelu(a, head.slope1.item()) + prelu(b, head.slope2.item())
    };
    let weighted_sum = |head, case: &MetaCase| -> f64 {
        (0..users).map(|r| omega(head, case, r) * case.loss.get(r, 0)).sum()
    };
    let expected = beta * (weighted_sum(&meta.contrastive, &cases[0]) + weighted_sum(&meta.contrastive, &cases[1]))
        + weighted_sum(&meta.bpr, &cases[2])
        + reg;
    (tape.value(total).item() - expected).abs()
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let checks = [
        ("infonce-cosine", infonce_error(Similarity::Cosine, &mut rng)),
        ("infonce-dot", infonce_error(Similarity::Dot, &mut rng)),
        ("bpr", bpr_error(&mut rng)),
        ("meta-knowledge", meta_knowledge_error(&mut rng)),
        ("weighted-objective", weighted_objective_error(&mut rng)),
    ];
    let detail = checks
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    if checks.iter().all(|(_, e)| *e < ORACLE_TOL) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn closed_forms() -> Outcome {
    let mut tape = Tape::new();
    let e = Tensor::from_rows(&[vec![0.3, -0.2, 0.5]]);
    let ut = tape.constant(e.clone());
    let it = tape.constant(Tensor::from_rows(&[vec![0.1, 0.4, -0.7], vec![0.1, 0.4, -0.7]]));
    let b = bpr_per_sample(
        &mut tape,
        ut,
        it,
        &[BprSample {
            user: 0,
            pos: 0,
            neg: 1,
            behavior: 0,
        }],
    )
    .unwrap();
    let bpr_err = (tape.value(b).item() - 2f64.ln()).abs();

    let s = 7;
    let same = tape.constant(Tensor::filled(s + 1, 3, 0.4));
    let batch = ContrastiveBatch::new(vec![0], (1..=s).collect(), 0.2).unwrap();
    let (cl, _) = infonce_pair(&mut tape, same, same, &batch, Similarity::Cosine).unwrap();
    let cl_err = (tape.value(cl).item() - ((s + 1) as f64).ln()).abs();

    let (hit, ndcg) = hit_and_ndcg(3, 10);
    let ndcg_err = if hit { (ndcg - 0.5).abs() } else { f64::INFINITY };
    let detail = format!("bpr ln2 {bpr_err:.1e}, infonce log(S+1) {cl_err:.1e}, ndcg@rank3 {ndcg_err:.1e}");
    if bpr_err.max(cl_err).max(ndcg_err) <= CLOSED_FORM_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn retailrocket_tsv() -> Result<PathBuf, String> {
    match std::env::var_os("CML_RETAILROCKET_TSV") {
        Some(p) if Path::new(&p).is_file() => Ok(PathBuf::from(p)),
        Some(p) => Err(format!("{} is not a file", Path::new(&p).display())),
        None => Err("Retailrocket data not available (set CML_RETAILROCKET_TSV)".into()),
    }
}

fn retailrocket_prepared(work: &Path) -> Result<pipeline::PreparedDataset, String> {
    let input = retailrocket_tsv()?;
    let out = work.join("retailrocket");
    pipeline::prepare(
        &PrepareOptions {
            input,
            format: InputFormat::TripleTsv,
            behaviors: Some(vec!["view".into(), "addtocart".into(), "transaction".into()]),
            target: "transaction".into(),
            min_target: 3,
            split: SplitOptions::default(),
        },
        &out,
    )
    .map_err(|e| e.to_string())?;
    pipeline::load_prepared(&out).map_err(|e| e.to_string())
}

fn train_and_test(
    dataset: &pipeline::PreparedDataset,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<(f64, f64, Duration), String> {
    let start = Instant::now();
    pipeline::train(dataset, cfg, out, |_| {}).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ck = cml_core::checkpoint::Checkpoint::load(&out.join("checkpoint.json")).map_err(|e| e.to_string())?;
    let report = pipeline::evaluate_checkpoint(dataset, &ck, Protocol::Sampled { negatives: 99 }, 10, cfg.seed)
        .map_err(|e| e.to_string())?;
    Ok((report.hr, report.ndcg, elapsed))
}

fn retailrocket_floor() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dataset = retailrocket_prepared(work.path())?;
    let (hr, ndcg, elapsed) = train_and_test(&dataset, &TrainConfig::default(), &work.path().join("full"))?;
    let detail = format!("HR@10 {hr:.4}, NDCG@10 {ndcg:.4}, {:.0}s", elapsed.as_secs_f64());
    if hr >= 0.30 && ndcg >= 0.18 && elapsed < Duration::from_secs(2 * 3600) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation_ordering() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dataset = retailrocket_prepared(work.path())?;
    let variants = [
        ("full", Ablation::default()),
        ("clf", Ablation { clf: true, ..Ablation::default() }),
        ("mcn", Ablation { mcn: true, ..Ablation::default() }),
        ("mke", Ablation { mke: true, ..Ablation::default() }),
    ];
    let mut mean_hr = Vec::new();
    for (name, ablation) in variants {
        let mut sum = 0.0;
        for seed in 0..3 {
            let cfg = TrainConfig {
                seed,
                ablation,
                ..TrainConfig::default()
            };
            let (hr, _, _) = train_and_test(&dataset, &cfg, &work.path().join(format!("{name}-{seed}")))?;
            sum += hr;
        }
        mean_hr.push(sum / 3.0);
    }
    let full = mean_hr[0];
    let detail = format!(
        "mean HR@10 full {:.4}, clf {:.4}, mcn {:.4}, mke {:.4}",
        mean_hr[0], mean_hr[1], mean_hr[2], mean_hr[3]
    );
    if full >= 1.05 * mean_hr[1] && full >= 1.01 * mean_hr[2] && full >= 1.01 * mean_hr[3] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bilevel_sanity() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..5 {
        let o = run_clean_noisy(seed, 200, &clean_noisy_config(seed)).map_err(|e| e.to_string())?;
        wins += usize::from(o.clean_wins());
        parts.push(format!("{:.3}/{:.3}", o.omega_clean, o.omega_noisy));
    }
    let detail = format!("clean > noisy in {wins}/5 seeds (clean/noisy {})", parts.join(" "));
    if wins >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn end_to_end(work: &Path, raw: &Path) -> Result<(Vec<u8>, String), String> {
    let e = |x: cml_core::CmlError| x.to_string();
    let prepared = work.join("prepared");
    pipeline::prepare(
        &PrepareOptions {
            input: raw.to_path_buf(),
            format: InputFormat::TripleTsv,
            behaviors: None,
            target: "buy".into(),
            min_target: 3,
            split: SplitOptions::default(),
        },
        &prepared,
    )
    .map_err(e)?;
    let dataset = pipeline::load_prepared(&prepared).map_err(e)?;
    let cfg = TrainConfig {
        epochs: 2,
        dim: 16,
        layers: 2,
        negative_samples: 32,
        train_batch: 128,
        meta_batch: 64,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = work.join("run");
    pipeline::train(&dataset, &cfg, &out, |_| {}).map_err(e)?;
    let ck = cml_core::checkpoint::Checkpoint::load(&out.join("checkpoint.json")).map_err(e)?;
    let report = pipeline::evaluate_checkpoint(&dataset, &ck, Protocol::Sampled { negatives: 99 }, 10, 5).map_err(e)?;
    let metrics = fs::read(out.join("metrics.jsonl")).map_err(|x| x.to_string())?;
    let eval = serde_json::to_string(&report).map_err(|x| x.to_string())?;
    Ok((metrics, eval))
}

fn determinism() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let raw = work.path().join("raw.tsv");
    generate(&SyntheticConfig {
        users: 80,
        items: 120,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .write_tsv(&raw)
    .map_err(|e| e.to_string())?;
    let a = end_to_end(&work.path().join("a"), &raw)?;
    let b = end_to_end(&work.path().join("b"), &raw)?;
    let epochs = a.0.iter().filter(|&&c| c == b'\n').count();
    if a == b && epochs == 2 {
        Ok(format!("{epochs} epoch records and the evaluation report are byte-identical"))
    } else {
        Err(format!("runs differ ({epochs} epoch records in the first run)"))
    }
}

fn full_scale_out_of_scope() -> Outcome {
    Ok("Tmall and IJCAI full-scale results are not reproduced; Retailrocket criteria stand in".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("loss oracles", loss_oracles),
        ("closed forms", closed_forms),
        ("retailrocket floor", retailrocket_floor),
        ("ablation ordering", ablation_ordering),
        ("bilevel sanity", bilevel_sanity),
        ("determinism", determinism),
        ("full-scale benchmarks out of scope", full_scale_out_of_scope),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
