//! Multi-behavior interaction logs: loading, re-indexing and leave-one-out splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmlError, Result};

/// One observed `(user, item, behavior)` edge, all dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub behavior: usize,
}

impl Interaction {
    pub fn new(user: usize, item: usize, behavior: usize) -> Self {
        Self {
            user,
            item,
            behavior,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputFormat {
    /// `user<TAB>item<TAB>behavior[<TAB>timestamp]` in a single file.
    TripleTsv,
    /// A directory with one `<behavior>.tsv` edge list per behavior.
    PerBehaviorFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionStore {
    pub num_users: usize,
    pub num_items: usize,
    pub behaviors: Vec<String>,
    pub target: usize,
    /// Interactions in file order (deduplicated, last occurrence kept).
    pub triples: Vec<Interaction>,
    /// Parallel to `triples` when the input carried timestamps.
    pub timestamps: Option<Vec<i64>>,
    /// Raw id of each dense user index.
    pub user_ids: Vec<String>,
    /// Raw id of each dense item index.
    pub item_ids: Vec<String>,
}

struct RawRecord {
    user: String,
    item: String,
    behavior: usize,
    timestamp: Option<i64>,
}

fn parse_timestamp(field: &str, line_no: usize) -> Result<i64> {
    field
        .trim()
        .parse::<i64>()
        .or_else(|_| field.trim().parse::<f64>().map(|f| f as i64))
        .map_err(|_| CmlError::Data(format!("line {line_no}: bad timestamp `{field}`")))
}

fn behavior_index(
    label: &str,
    names: &mut Vec<String>,
    fixed: bool,
    line_no: usize,
) -> Result<usize> {
    if let Some(k) = names.iter().position(|n| n == label) {
        return Ok(k);
    }
    if fixed {
        return Err(CmlError::Data(format!(
            "line {line_no}: unknown behavior label `{label}` (expected one of {names:?})"
        )));
    }
    names.push(label.to_string());
    Ok(names.len() - 1)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CmlError::io(path, e))
}

impl InteractionStore {
    /// Loads interaction logs and densely re-indexes raw ids in order of first
    /// appearance. `behaviors` fixes the behavior vocabulary and order; when
    /// omitted it is inferred from the input. `target` names the target behavior.
    pub fn load(
        path: &Path,
        format: InputFormat,
        behaviors: Option<&[String]>,
        target: &str,
    ) -> Result<Self> {
        let mut names: Vec<String> = behaviors.map(<[String]>::to_vec).unwrap_or_default();
        let fixed = behaviors.is_some();
        let mut records = Vec::new();
        match format {
            InputFormat::TripleTsv => {
                let text = read_to_string(path)?;
                for (n, line) in text.lines().enumerate() {
                    let line_no = n + 1;
                    let line = line.trim_end_matches('\r');
                    if line.trim().is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let fields: Vec<&str> = line.split('\t').collect();
                    if fields.len() < 3 {
                        return Err(CmlError::Data(format!(
                            "line {line_no}: expected user, item, behavior columns"
                        )));
                    }
                    let behavior = behavior_index(fields[2].trim(), &mut names, fixed, line_no)?;
                    let timestamp = match fields.get(3) {
                        Some(f) if !f.trim().is_empty() => Some(parse_timestamp(f, line_no)?),
                        _ => None,
                    };
                    records.push(RawRecord {
                        user: fields[0].trim().to_string(),
                        item: fields[1].trim().to_string(),
                        behavior,
                        timestamp,
                    });
                }
            }
            InputFormat::PerBehaviorFiles => {
                if !fixed {
                    let mut stems: Vec<String> = fs::read_dir(path)
                        .map_err(|e| CmlError::io(path, e))?
                        .filter_map(|e| e.ok())
                        .map(|e| e.path())
                        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
                        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
                        .collect();
                    stems.sort();
                    names = stems;
                }
                for (k, name) in names.iter().enumerate() {
                    let file = path.join(format!("{name}.tsv"));
                    let text = read_to_string(&file)?;
                    for (n, line) in text.lines().enumerate() {
                        let line = line.trim_end_matches('\r');
                        if line.trim().is_empty() || line.starts_with('#') {
                            continue;
                        }
                        let fields: Vec<&str> = line.split('\t').collect();
                        if fields.len() < 2 {
                            return Err(CmlError::Data(format!(
                                "{}:{}: expected user, item columns",
                                file.display(),
                                n + 1
                            )));
                        }
                        let timestamp = match fields.get(2) {
                            Some(f) if !f.trim().is_empty() => Some(parse_timestamp(f, n + 1)?),
                            _ => None,
                        };
                        records.push(RawRecord {
                            user: fields[0].trim().to_string(),
                            item: fields[1].trim().to_string(),
                            behavior: k,
                            timestamp,
                        });
                    }
                }
            }
        }
        if records.is_empty() {
            return Err(CmlError::Data("no interactions".into()));
        }
        Self::from_records(records, names, target)
    }

    fn from_records(records: Vec<RawRecord>, behaviors: Vec<String>, target: &str) -> Result<Self> {
        let target = behaviors.iter().position(|b| b == target).ok_or_else(|| {
            CmlError::Data(format!(
                "target behavior `{target}` not among behaviors {behaviors:?}"
            ))
        })?;
        let has_ts = records.iter().any(|r| r.timestamp.is_some());
        if has_ts && records.iter().any(|r| r.timestamp.is_none()) {
            return Err(CmlError::Data(
                "timestamps must be present on every line or on none".into(),
            ));
        }
        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut dense = Vec::with_capacity(records.len());
        for r in records {
            let u = *user_index.entry(r.user.clone()).or_insert_with(|| {
                user_ids.push(r.user.clone());
                user_ids.len() - 1
            });
            let i = *item_index.entry(r.item.clone()).or_insert_with(|| {
                item_ids.push(r.item.clone());
                item_ids.len() - 1
            });
            dense.push((Interaction::new(u, i, r.behavior), r.timestamp.unwrap_or(0)));
        }
        // Keep the last occurrence of each duplicate triple.
        let mut last: HashMap<Interaction, usize> = HashMap::with_capacity(dense.len());
        for (pos, (t, _)) in dense.iter().enumerate() {
            last.insert(*t, pos);
        }
        let duplicates = dense.len() - last.len();
        if duplicates > 0 {
            info!("dropped {duplicates} duplicate interactions");
        }
        let kept: Vec<(Interaction, i64)> = dense
            .into_iter()
            .enumerate()
            .filter(|(pos, (t, _))| last[t] == *pos)
            .map(|(_, x)| x)
            .collect();
        let (triples, ts): (Vec<_>, Vec<_>) = kept.into_iter().unzip();
        let store = Self {
            num_users: user_ids.len(),
            num_items: item_ids.len(),
            behaviors,
            target,
            triples,
            timestamps: has_ts.then_some(ts),
            user_ids,
            item_ids,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn num_behaviors(&self) -> usize {
        self.behaviors.len()
    }

    pub fn target_name(&self) -> &str {
        &self.behaviors[self.target]
    }

    pub fn validate(&self) -> Result<()> {
        if self.target >= self.behaviors.len() {
            return Err(CmlError::Data("target behavior index out of range".into()));
        }
        if self.user_ids.len() != self.num_users || self.item_ids.len() != self.num_items {
            return Err(CmlError::Data("raw id tables do not match entity counts".into()));
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.triples.len() {
                return Err(CmlError::Data("timestamp column misaligned".into()));
            }
        }
        let mut seen = HashSet::with_capacity(self.triples.len());
        for t in &self.triples {
            if t.user >= self.num_users || t.item >= self.num_items {
                return Err(CmlError::Data(format!("interaction {t:?} out of range")));
            }
            if t.behavior >= self.behaviors.len() {
                return Err(CmlError::Data(format!("behavior index {} out of range", t.behavior)));
            }
            if !seen.insert(*t) {
                return Err(CmlError::Data(format!("duplicate interaction {t:?}")));
            }
        }
        Ok(())
    }

    pub fn count_behavior(&self, k: usize) -> usize {
        self.triples.iter().filter(|t| t.behavior == k).count()
    }

    /// Number of target-behavior interactions per user.
    pub fn target_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_users];
        for t in self.triples.iter().filter(|t| t.behavior == self.target) {
            counts[t.user] += 1;
        }
        counts
    }

    /// Keeps users for which `keep(user)` holds, then drops items left without
    /// interactions and re-indexes both densely (order preserved).
    pub fn retain_users(&self, keep: impl Fn(usize) -> bool) -> Result<Self> {
        let kept_users: Vec<usize> = (0..self.num_users).filter(|&u| keep(u)).collect();
        let dropped = self.num_users - kept_users.len();
        if dropped > 0 {
            info!("filter removed {dropped} users");
        }
        let mut user_map = vec![usize::MAX; self.num_users];
        for (new, &old) in kept_users.iter().enumerate() {
            user_map[old] = new;
        }
        let mut item_used = vec![false; self.num_items];
        for t in &self.triples {
            if user_map[t.user] != usize::MAX {
                item_used[t.item] = true;
            }
        }
        let orphan_items = item_used.iter().filter(|&&u| !u).count();
        if orphan_items > 0 {
            warn!("dropping {orphan_items} items with zero interactions");
        }
        let mut item_map = vec![usize::MAX; self.num_items];
        let mut item_ids = Vec::new();
        for (old, used) in item_used.iter().enumerate() {
            if *used {
                item_map[old] = item_ids.len();
                item_ids.push(self.item_ids[old].clone());
            }
        }
        let mut triples = Vec::new();
        let mut ts = Vec::new();
        for (pos, t) in self.triples.iter().enumerate() {
            if user_map[t.user] == usize::MAX {
                continue;
            }
            triples.push(Interaction::new(user_map[t.user], item_map[t.item], t.behavior));
            if let Some(all) = &self.timestamps {
                ts.push(all[pos]);
            }
        }
        if triples.is_empty() {
            return Err(CmlError::Data("no interactions".into()));
        }
        Ok(Self {
            num_users: kept_users.len(),
            num_items: item_ids.len(),
            behaviors: self.behaviors.clone(),
            target: self.target,
            triples,
            timestamps: self.timestamps.as_ref().map(|_| ts),
            user_ids: kept_users.iter().map(|&u| self.user_ids[u].clone()).collect(),
            item_ids,
        })
    }

    /// Drops users with fewer than `min` target-behavior interactions.
    pub fn filter_min_target(&self, min: usize) -> Result<Self> {
        let counts = self.target_counts();
        self.retain_users(|u| counts[u] >= min)
    }

    /// Writes the store back out as a triple TSV using raw ids.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (pos, t) in self.triples.iter().enumerate() {
            write!(
                out,
                "{}\t{}\t{}",
                self.user_ids[t.user], self.item_ids[t.item], self.behaviors[t.behavior]
            )
            .expect("write to vec");
            if let Some(ts) = &self.timestamps {
                write!(out, "\t{}", ts[pos]).expect("write to vec");
            }
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| CmlError::io(path, e))
    }
}

/// Leave-one-out split of a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// Held-out target-behavior item per user.
    pub test: BTreeMap<usize, usize>,
    pub meta: Vec<Interaction>,
    pub train: Vec<Interaction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub meta_fraction: f64,
    pub seed: u64,
    /// Also remove auxiliary-behavior edges of each held-out `(user, item)` pair.
    pub drop_auxiliary_of_test: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            meta_fraction: 0.1,
            seed: 0,
            drop_auxiliary_of_test: false,
        }
    }
}

/// Holds out each user's last target-behavior interaction (by timestamp when
/// available, file order otherwise) and samples `meta_fraction` of the
/// remaining interactions into the meta set.
pub fn split_leave_one_out(store: &InteractionStore, opts: &SplitOptions) -> Result<SplitAssignment> {
    if !(0.0..0.5).contains(&opts.meta_fraction) {
        return Err(CmlError::config(
            "meta_fraction",
            format!("must lie in [0, 0.5), got {}", opts.meta_fraction),
        ));
    }
    let order_key = |pos: usize| -> (i64, usize) {
        let ts = store.timestamps.as_ref().map_or(0, |t| t[pos]);
        (ts, pos)
    };
    let mut last: BTreeMap<usize, (i64, usize)> = BTreeMap::new();
    let mut target_counts = vec![0usize; store.num_users];
    for (pos, t) in store.triples.iter().enumerate() {
        if t.behavior != store.target {
            continue;
        }
        target_counts[t.user] += 1;
        let key = order_key(pos);
        let slot = last.entry(t.user).or_insert(key);
        if key > *slot {
            *slot = key;
        }
    }
    let single = target_counts.iter().filter(|&&c| c == 1).count();
    if single > 0 {
        info!("{single} users have a single target interaction; it goes to test");
    }
    let test_pos: HashSet<usize> = last.values().map(|&(_, pos)| pos).collect();
    let test: BTreeMap<usize, usize> = last
        .iter()
        .map(|(&u, &(_, pos))| (u, store.triples[pos].item))
        .collect();
    let rest: Vec<Interaction> = store
        .triples
        .iter()
        .enumerate()
        .filter(|(pos, _)| !test_pos.contains(pos))
        .map(|(_, t)| *t)
        .filter(|t| !(opts.drop_auxiliary_of_test && test.get(&t.user) == Some(&t.item)))
        .collect();
    let n_meta = (opts.meta_fraction * rest.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut is_meta = vec![false; rest.len()];
    for idx in sample(&mut rng, rest.len(), n_meta) {
        is_meta[idx] = true;
    }
    let (meta, train): (Vec<_>, Vec<_>) = rest
        .iter()
        .zip(&is_meta)
        .partition(|(_, &m)| m);
    Ok(SplitAssignment {
        test,
        meta: meta.into_iter().map(|(t, _)| *t).collect(),
        train: train.into_iter().map(|(t, _)| *t).collect(),
    })
}

impl SplitAssignment {
    /// Train and meta interactions together; this is what the graph is built from.
    pub fn observed(&self) -> impl Iterator<Item = &Interaction> {
        self.train.iter().chain(&self.meta)
    }

    pub fn check_no_leakage(&self, target: usize) -> Result<()> {
        for t in self.observed() {
            if t.behavior == target && self.test.get(&t.user) == Some(&t.item) {
                return Err(CmlError::Data(format!("test interaction {t:?} leaked into training")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn load_str(contents: &str) -> Result<InteractionStore> {
        let f = write_tmp(contents);
        InteractionStore::load(f.path(), InputFormat::TripleTsv, None, "buy")
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = load_str("").unwrap_err();
        assert!(err.to_string().contains("no interactions"), "{err}");
    }

    #[test]
    fn full_two_by_two_matrix() {
        let s = load_str("a\tx\tbuy\na\ty\tbuy\nb\tx\tbuy\nb\ty\tbuy\n").unwrap();
        assert_eq!((s.num_users, s.num_items, s.triples.len()), (2, 2, 4));
    }

    #[test]
    fn duplicates_are_removed() {
        let s = load_str("a\tx\tbuy\na\tx\tview\na\tx\tbuy\n").unwrap();
        assert_eq!(s.triples.len(), 2);
        // last occurrence kept, so the purchase now comes after the view
        assert_eq!(s.triples[1].behavior, s.target);
    }

    #[test]
    fn unknown_behavior_is_fatal_with_fixed_vocabulary() {
        let f = write_tmp("a\tx\tbuy\na\ty\tclick\n");
        let names = vec!["view".to_string(), "buy".to_string()];
        let err = InteractionStore::load(f.path(), InputFormat::TripleTsv, Some(&names), "buy")
            .unwrap_err();
        assert!(err.to_string().contains("unknown behavior"), "{err}");
    }

    #[test]
    fn per_behavior_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("view.tsv"), "u1\ti1\nu2\ti2\n").unwrap();
        fs::write(dir.path().join("buy.tsv"), "u1\ti2\n").unwrap();
        let s = InteractionStore::load(dir.path(), InputFormat::PerBehaviorFiles, None, "buy").unwrap();
        assert_eq!(s.behaviors, vec!["buy", "view"]);
        assert_eq!(s.triples.len(), 3);
        assert_eq!(s.count_behavior(s.target), 1);
    }

    #[test]
    fn leave_one_out_takes_last_in_file_order() {
        let s = load_str("u\ti1\tbuy\nu\ti2\tbuy\nu\ti3\tbuy\nu\ti1\tview\n").unwrap();
        let split = split_leave_one_out(&s, &SplitOptions::default()).unwrap();
        let i3 = s.item_ids.iter().position(|x| x == "i3").unwrap();
        assert_eq!(split.test[&0], i3);
        let train_items: HashSet<usize> = split
            .train
            .iter()
            .filter(|t| t.behavior == s.target)
            .map(|t| t.item)
            .collect();
        assert_eq!(train_items.len(), 2);
        assert!(split.meta.is_empty());
    }

    #[test]
    fn leave_one_out_prefers_timestamps() {
        let s = load_str("u\ti1\tbuy\t30\nu\ti2\tbuy\t10\nu\ti3\tbuy\t20\n").unwrap();
        let split = split_leave_one_out(&s, &SplitOptions::default()).unwrap();
        assert_eq!(s.item_ids[split.test[&0]], "i1");
    }

    #[test]
    fn single_target_interaction_goes_to_test() {
        let s = load_str("u\ti1\tview\nu\ti2\tbuy\n").unwrap();
        let split = split_leave_one_out(&s, &SplitOptions::default()).unwrap();
        assert_eq!(split.test.len(), 1);
        assert!(split.train.iter().all(|t| t.behavior != s.target));
    }

    #[test]
    fn meta_fraction_bounds() {
        let s = load_str("u\ti1\tbuy\n").unwrap();
        for bad in [-0.1, 0.5, 0.9] {
            let opts = SplitOptions {
                meta_fraction: bad,
                ..Default::default()
            };
            assert!(split_leave_one_out(&s, &opts).is_err());
        }
    }

    #[test]
    fn drop_auxiliary_of_test_pair() {
        let s = load_str("u\ti1\tview\nu\ti1\tbuy\nu\ti2\tbuy\nu\ti2\tview\n").unwrap();
        let keep = split_leave_one_out(&s, &SplitOptions::default()).unwrap();
        assert_eq!(keep.train.len(), 3);
        let opts = SplitOptions {
            drop_auxiliary_of_test: true,
            ..Default::default()
        };
        let dropped = split_leave_one_out(&s, &opts).unwrap();
        assert_eq!(dropped.train.len(), 2);
    }

    #[test]
    fn min_target_filter_reindexes() {
        let s = load_str("a\tx\tbuy\nb\ty\tbuy\nb\tz\tbuy\nb\tx\tview\nc\tw\tview\n").unwrap();
        let f = s.filter_min_target(2).unwrap();
        assert_eq!(f.user_ids, vec!["b"]);
        assert_eq!(f.num_items, 3);
        f.validate().unwrap();
    }
}
