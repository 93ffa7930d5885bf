//! File-level workflow: prepare a dataset directory, train, evaluate, export.
//!
//! A prepared directory holds
//!
//! * `users.txt`, `items.txt`: raw ids, one per line, in dense index order;
//! * `train.tsv`, `meta.tsv`, `test.tsv`: `user<TAB>item<TAB>behavior` with raw ids;
//! * `manifest.json`: counts, behaviors, seed and a hash of every file above.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{hex_digest, TrainConfig};
use crate::data::{split_leave_one_out, InputFormat, Interaction, InteractionStore, SplitAssignment, SplitOptions};
use crate::encoder::EmbeddingState;
use crate::error::{CmlError, Result};
use crate::eval::{evaluate, MetricReport, Protocol};
use crate::trainer::{user_pair_weights, EpochRecord, FitReport, Trainer, TrainingData};

pub const MANIFEST_VERSION: u32 = 1;
const SPLIT_FILES: [&str; 3] = ["train.tsv", "meta.tsv", "test.tsv"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub input: PathBuf,
    pub format: InputFormat,
    /// Fixed behavior vocabulary; inferred from the input when `None`.
    pub behaviors: Option<Vec<String>>,
    pub target: String,
    /// Users with fewer target interactions are dropped.
    pub min_target: usize,
    pub split: SplitOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: BTreeMap<String, usize>,
    pub meta: BTreeMap<String, usize>,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_users: usize,
    pub num_items: usize,
    pub behaviors: Vec<String>,
    pub target: String,
    pub seed: u64,
    pub meta_fraction: f64,
    pub min_target: usize,
    pub drop_auxiliary_of_test: bool,
    /// Interactions read from the input, after deduplication.
    pub loaded_interactions: usize,
    /// Interactions left after the minimum-target filter.
    pub interactions: usize,
    pub counts: SplitCounts,
    /// SHA-256 of every data file, by file name.
    pub files: BTreeMap<String, String>,
}

/// A loaded prepared directory.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub manifest: DatasetManifest,
    pub manifest_hash: String,
    pub data: TrainingData,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CmlError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CmlError::io(path, e))
}

fn counts_by_behavior(triples: &[Interaction], behaviors: &[String]) -> BTreeMap<String, usize> {
    let mut c: BTreeMap<String, usize> = behaviors.iter().map(|b| (b.clone(), 0)).collect();
    for t in triples {
        *c.get_mut(&behaviors[t.behavior]).expect("known behavior") += 1;
    }
    c
}

fn triples_tsv(triples: &[Interaction], store: &InteractionStore) -> String {
    let mut s = String::new();
    for t in triples {
        writeln!(
            s,
            "{}\t{}\t{}",
            store.user_ids[t.user], store.item_ids[t.item], store.behaviors[t.behavior]
        )
        .expect("write to string");
    }
    s
}

fn lines(ids: &[String]) -> String {
    let mut s = String::new();
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    s
}

/// Loads, filters and splits the input, then writes the prepared directory.
/// Output bytes depend only on the input and the options.
pub fn prepare(opts: &PrepareOptions, out_dir: &Path) -> Result<DatasetManifest> {
    let store = InteractionStore::load(&opts.input, opts.format, opts.behaviors.as_deref(), &opts.target)?;
    let loaded = store.triples.len();
    let store = if opts.min_target > 0 {
        store.filter_min_target(opts.min_target)?
    } else {
        store
    };
    store.validate()?;
    let split = split_leave_one_out(&store, &opts.split)?;
    split.check_no_leakage(store.target)?;
    fs::create_dir_all(out_dir).map_err(|e| CmlError::io(out_dir, e))?;

    let test: Vec<Interaction> = split
        .test
        .iter()
        .map(|(&u, &i)| Interaction::new(u, i, store.target))
        .collect();
    let contents = [
        ("users.txt", lines(&store.user_ids)),
        ("items.txt", lines(&store.item_ids)),
        ("train.tsv", triples_tsv(&split.train, &store)),
        ("meta.tsv", triples_tsv(&split.meta, &store)),
        ("test.tsv", triples_tsv(&test, &store)),
    ];
    let mut files = BTreeMap::new();
    for (name, text) in &contents {
        write(&out_dir.join(name), text.as_bytes())?;
        files.insert(name.to_string(), hex_digest(text.as_bytes()));
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_users: store.num_users,
        num_items: store.num_items,
        behaviors: store.behaviors.clone(),
        target: store.target_name().to_string(),
        seed: opts.split.seed,
        meta_fraction: opts.split.meta_fraction,
        min_target: opts.min_target,
        drop_auxiliary_of_test: opts.split.drop_auxiliary_of_test,
        loaded_interactions: loaded,
        interactions: store.triples.len(),
        counts: SplitCounts {
            train: counts_by_behavior(&split.train, &store.behaviors),
            meta: counts_by_behavior(&split.meta, &store.behaviors),
            test: split.test.len(),
        },
        files,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write(&out_dir.join("manifest.json"), text.as_bytes())?;
    info!(
        "prepared {} users, {} items, {} interactions into {}",
        manifest.num_users,
        manifest.num_items,
        manifest.interactions,
        out_dir.display()
    );
    Ok(manifest)
}

fn index_of(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}

fn parse_split_file(
    path: &Path,
    users: &HashMap<&str, usize>,
    items: &HashMap<&str, usize>,
    behaviors: &[String],
) -> Result<Vec<Interaction>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || CmlError::Data(format!("{}:{}: malformed line `{line}`", path.display(), n + 1));
        let mut f = line.split('\t');
        let (u, i, b) = (f.next().ok_or_else(bad)?, f.next().ok_or_else(bad)?, f.next().ok_or_else(bad)?);
        let user = *users.get(u).ok_or_else(bad)?;
        let item = *items.get(i).ok_or_else(bad)?;
        let behavior = behaviors.iter().position(|x| x == b).ok_or_else(bad)?;
        out.push(Interaction::new(user, item, behavior));
    }
    Ok(out)
}

/// Reads a prepared directory and checks every file against the manifest.
pub fn load_prepared(dir: &Path) -> Result<PreparedDataset> {
    let manifest_text = read(&dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CmlError::Data(format!("unsupported manifest version {}", manifest.version)));
    }
    for (name, expected) in &manifest.files {
        let bytes = fs::read(dir.join(name)).map_err(|e| CmlError::io(dir.join(name), e))?;
        if &hex_digest(&bytes) != expected {
            return Err(CmlError::Data(format!("{name} does not match the manifest hash")));
        }
    }
    let user_ids: Vec<String> = read(&dir.join("users.txt"))?.lines().map(str::to_string).collect();
    let item_ids: Vec<String> = read(&dir.join("items.txt"))?.lines().map(str::to_string).collect();
    if user_ids.len() != manifest.num_users || item_ids.len() != manifest.num_items {
        return Err(CmlError::Data("id lists disagree with the manifest counts".into()));
    }
    let target = manifest
        .behaviors
        .iter()
        .position(|b| *b == manifest.target)
        .ok_or_else(|| CmlError::Data(format!("target `{}` is not a listed behavior", manifest.target)))?;
    let (users, items) = (index_of(&user_ids), index_of(&item_ids));
    let mut parts = SPLIT_FILES
        .iter()
        .map(|f| parse_split_file(&dir.join(f), &users, &items, &manifest.behaviors));
    let train = parts.next().expect("train")?;
    let meta = parts.next().expect("meta")?;
    let test_rows = parts.next().expect("test")?;
    let mut test = BTreeMap::new();
    for t in test_rows {
        if t.behavior != target || test.insert(t.user, t.item).is_some() {
            return Err(CmlError::Data(format!("bad test row {t:?}")));
        }
    }
    let split = SplitAssignment { test, meta, train };
    split.check_no_leakage(target)?;
    let data = TrainingData {
        num_users: manifest.num_users,
        num_items: manifest.num_items,
        behaviors: manifest.behaviors.clone(),
        target,
        split,
    };
    Ok(PreparedDataset {
        manifest_hash: hex_digest(manifest_text.as_bytes()),
        manifest,
        data,
        user_ids,
        item_ids,
    })
}

/// Provenance of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub config_hash: String,
    pub manifest_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub checkpoint: String,
    pub metrics: String,
    pub best_epoch: Option<usize>,
    pub best_hr10: Option<f64>,
    pub stopped_early: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: FitReport,
    pub run: RunManifest,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Trains on a prepared directory and writes `checkpoint.json`,
/// `metrics.jsonl` (one record per epoch) and `run.json` to `out_dir`.
pub fn train(
    dataset: &PreparedDataset,
    config: &TrainConfig,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let started = unix_now();
    fs::create_dir_all(out_dir).map_err(|e| CmlError::io(out_dir, e))?;
    let mut trainer = Trainer::new(config.clone(), &dataset.data)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = String::new();
    let report = trainer.fit(|r| {
        log.push_str(&serde_json::to_string(r).expect("record serialises"));
        log.push('\n');
        on_epoch(r);
    })?;
    write(&metrics_path, log.as_bytes())?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    Checkpoint::from_trainer(&trainer, &dataset.data.behaviors, Some(dataset.manifest_hash.clone()))
        .save(&checkpoint_path)?;
    let run = RunManifest {
        config: config.clone(),
        config_hash: config.hash(),
        manifest_hash: dataset.manifest_hash.clone(),
        seed: config.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        checkpoint: checkpoint_path.display().to_string(),
        metrics: metrics_path.display().to_string(),
        best_epoch: report.best_epoch,
        best_hr10: report.best_hr10,
        stopped_early: report.stopped_early,
        diverged: report.diverged,
    };
    write(&out_dir.join("run.json"), serde_json::to_string_pretty(&run)?.as_bytes())?;
    Ok(TrainOutcome { report, run })
}

fn check_compatible(dataset: &PreparedDataset, ck: &Checkpoint) -> Result<()> {
    if let Some(h) = &ck.manifest_hash {
        if *h != dataset.manifest_hash {
            return Err(CmlError::Data("checkpoint was trained on a different dataset".into()));
        }
    }
    if ck.model.user_emb.rows() != dataset.manifest.num_users || ck.model.item_emb.rows() != dataset.manifest.num_items {
        return Err(CmlError::Data("checkpoint tables do not match the dataset size".into()));
    }
    Ok(())
}

pub fn embedding_state(dataset: &PreparedDataset, ck: &Checkpoint) -> Result<EmbeddingState> {
    check_compatible(dataset, ck)?;
    let graph = dataset.data.graph(ck.config.normalize)?;
    EmbeddingState::compute(&graph, &ck.model)
}

/// Test-set metrics of a checkpoint.
pub fn evaluate_checkpoint(
    dataset: &PreparedDataset,
    ck: &Checkpoint,
    protocol: Protocol,
    k: usize,
    seed: u64,
) -> Result<MetricReport> {
    let state = embedding_state(dataset, ck)?;
    if !state.is_finite() {
        return Err(CmlError::Numerical("embeddings are not finite".into()));
    }
    Ok(evaluate(&state, &dataset.data.split, dataset.data.target, protocol, k, seed))
}

/// `user,item,rank,candidates,hit,ndcg` with raw ids.
pub fn per_user_csv(dataset: &PreparedDataset, report: &MetricReport) -> String {
    let mut s = String::from("user,item,rank,candidates,hit,ndcg\n");
    for r in &report.per_user {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            dataset.user_ids[r.user],
            dataset.item_ids[r.item],
            r.rank,
            r.candidates,
            u8::from(r.hit),
            r.ndcg
        )
        .expect("write to string");
    }
    s
}

/// `user,pair,weight` for every user and auxiliary pair.
pub fn weights_csv(dataset: &PreparedDataset, ck: &Checkpoint) -> Result<String> {
    check_compatible(dataset, ck)?;
    let graph = dataset.data.graph(ck.config.normalize)?;
    let rows = user_pair_weights(&graph, &ck.model, &ck.meta, dataset.data.target, &ck.config)?;
    let mut s = String::from("user,pair,weight\n");
    for (u, k, w) in rows {
        writeln!(s, "{},{},{}", dataset.user_ids[u], dataset.data.pair_label(k), w).expect("write to string");
    }
    Ok(s)
}

/// `entity_type,id,behavior,dim0,...`: final tables under behavior `all`,
/// then one block per behavior.
pub fn embeddings_csv(dataset: &PreparedDataset, ck: &Checkpoint) -> Result<String> {
    let state = embedding_state(dataset, ck)?;
    let mut s = String::from("entity_type,id,behavior");
    for j in 0..state.dim() {
        write!(s, ",dim{j}").expect("write to string");
    }
    s.push('\n');
    let mut block = |kind: &str, ids: &[String], behavior: &str, table: &crate::tensor::Tensor| {
        for (r, id) in ids.iter().enumerate() {
            write!(s, "{kind},{id},{behavior}").expect("write to string");
            for v in table.row(r) {
                write!(s, ",{v}").expect("write to string");
            }
            s.push('\n');
        }
    };
    block("user", &dataset.user_ids, "all", &state.user_final);
    for (k, t) in state.user_behavior.iter().enumerate() {
        block("user", &dataset.user_ids, &dataset.data.behaviors[k], t);
    }
    block("item", &dataset.item_ids, "all", &state.item_final);
    for (k, t) in state.item_behavior.iter().enumerate() {
        block("item", &dataset.item_ids, &dataset.data.behaviors[k], t);
    }
    Ok(s)
}
