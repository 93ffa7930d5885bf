//! Leave-one-out top-K evaluation with hit ratio and NDCG.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, SplitAssignment};
use crate::encoder::EmbeddingState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Protocol {
    /// The positive against `negatives` sampled unobserved items.
    Sampled { negatives: usize },
    /// The positive against every item without a known target interaction.
    FullRank,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Sampled { negatives } => write!(f, "sampled-{negatives}"),
            Protocol::FullRank => write!(f, "full-rank"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user: usize,
    pub item: usize,
    /// 1-based rank of the positive among the candidates.
    pub rank: usize,
    pub candidates: usize,
    pub hit: bool,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hr: f64,
    pub ndcg: f64,
    pub k: usize,
    pub protocol: String,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub per_user: Vec<UserResult>,
}

/// Target-behavior positives per user, used to keep candidates unobserved.
#[derive(Debug, Clone, Default)]
pub struct KnownItems {
    per_user: Vec<HashSet<usize>>,
}

impl KnownItems {
    pub fn new(num_users: usize) -> Self {
        Self {
            per_user: vec![HashSet::new(); num_users],
        }
    }

    /// Every target-behavior item of each user across train, meta and test.
    pub fn from_split(split: &SplitAssignment, num_users: usize, target: usize) -> Self {
        let mut known = Self::new(num_users);
        known.extend(split.observed().filter(|t| t.behavior == target));
        for (&u, &i) in &split.test {
            known.insert(u, i);
        }
        known
    }

    pub fn insert(&mut self, user: usize, item: usize) {
        if user >= self.per_user.len() {
            self.per_user.resize(user + 1, HashSet::new());
        }
        self.per_user[user].insert(item);
    }

    pub fn extend<'a>(&mut self, it: impl IntoIterator<Item = &'a Interaction>) {
        for t in it {
            self.insert(t.user, t.item);
        }
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.per_user.get(user).is_some_and(|s| s.contains(&item))
    }

    pub fn count(&self, user: usize) -> usize {
        self.per_user.get(user).map_or(0, HashSet::len)
    }
}

/// The positive plus up to `n` distinct uniformly drawn items that the user
/// never interacted with under the target behavior. Falls back to every
/// eligible item when fewer than `n` exist.
pub fn sample_eval_negatives(
    known: &KnownItems,
    num_items: usize,
    user: usize,
    positive: usize,
    n: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    let excluded = known.count(user) + usize::from(!known.contains(user, positive));
    let eligible = num_items.saturating_sub(excluded);
    let mut out = vec![positive];
    if eligible <= n {
        if eligible < n {
            warn!("user {user}: only {eligible} eligible negatives (wanted {n})");
        }
        out.extend((0..num_items).filter(|&i| i != positive && !known.contains(user, i)));
        return out;
    }
    let mut chosen = HashSet::with_capacity(n);
    while chosen.len() < n {
        let i = rng.gen_range(0..num_items);
        if i != positive && !known.contains(user, i) && chosen.insert(i) {
            out.push(i);
        }
    }
    out
}

/// 1-based rank of `candidates[0]` under `scores`; ties are broken by lower
/// item index first.
pub fn rank_of_first(candidates: &[usize], scores: &[f64]) -> usize {
    let (pos_item, pos_score) = (candidates[0], scores[0]);
    1 + candidates[1..]
        .iter()
        .zip(&scores[1..])
        .filter(|&(&item, &s)| s > pos_score || (s == pos_score && item < pos_item))
        .count()
}

/// `(hit, ndcg)` for a single relevant item at `rank`.
pub fn hit_and_ndcg(rank: usize, k: usize) -> (bool, f64) {
    if rank <= k {
        (true, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (false, 0.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranks each user's positive against its candidates using `score(user, item)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with<F>(
    positives: &BTreeMap<usize, usize>,
    known: &KnownItems,
    num_users: usize,
    num_items: usize,
    protocol: Protocol,
    k: usize,
    seed: u64,
    score: F,
) -> MetricReport
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let tasks: Vec<(usize, usize)> = positives
        .iter()
        .filter(|(&u, &i)| u < num_users && i < num_items)
        .map(|(&u, &i)| (u, i))
        .collect();
    let skipped = positives.len() - tasks.len();
    if skipped > 0 {
        warn!("{skipped} users skipped: test item or user not indexed");
    }
    let per_user: Vec<UserResult> = tasks
        .par_iter()
        .map(|&(u, pos)| {
            let candidates = match protocol {
                Protocol::Sampled { negatives } => {
                    sample_eval_negatives(known, num_items, u, pos, negatives, seed)
                }
                Protocol::FullRank => std::iter::once(pos)
                    .chain((0..num_items).filter(|&i| i != pos && !known.contains(u, i)))
                    .collect(),
            };
            let scores: Vec<f64> = candidates.iter().map(|&i| score(u, i)).collect();
            let rank = rank_of_first(&candidates, &scores);
            let (hit, ndcg) = hit_and_ndcg(rank, k);
            UserResult {
                user: u,
                item: pos,
                rank,
                candidates: candidates.len(),
                hit,
                ndcg,
            }
        })
        .collect();
    let n = per_user.len().max(1) as f64;
    MetricReport {
        hr: per_user.iter().filter(|r| r.hit).count() as f64 / n,
        ndcg: per_user.iter().map(|r| r.ndcg).sum::<f64>() / n,
        k,
        protocol: protocol.to_string(),
        users_evaluated: per_user.len(),
        users_skipped: skipped,
        per_user,
    }
}

/// Scores with the dot product of final user and item embeddings.
pub fn evaluate(
    state: &EmbeddingState,
    split: &SplitAssignment,
    target: usize,
    protocol: Protocol,
    k: usize,
    seed: u64,
) -> MetricReport {
    let known = KnownItems::from_split(split, state.num_users(), target);
    evaluate_with(
        &split.test,
        &known,
        state.num_users(),
        state.num_items(),
        protocol,
        k,
        seed,
        |u, i| dot(state.user_final.row(u), state.item_final.row(i)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_is_full_credit() {
        assert_eq!(hit_and_ndcg(1, 10), (true, 1.0));
    }

    #[test]
    fn rank_three_is_half() {
        let (hit, ndcg) = hit_and_ndcg(3, 10);
        assert!(hit);
        assert!((ndcg - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rank_eleven_misses() {
        assert_eq!(hit_and_ndcg(11, 10), (false, 0.0));
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(rank_of_first(&[5, 3, 7], &[1.0, 1.0, 1.0]), 2);
        assert_eq!(rank_of_first(&[3, 5, 7], &[1.0, 1.0, 1.0]), 1);
    }

    #[test]
    fn sampled_candidates_exclude_known_items() {
        let mut known = KnownItems::new(1);
        known.insert(0, 4);
        let c = sample_eval_negatives(&known, 100, 0, 4, 99, 7);
        assert_eq!(c.len(), 100);
        assert_eq!(c[0], 4);
        let set: HashSet<_> = c.iter().collect();
        assert_eq!(set.len(), 100);
    }

    #[test]
    fn short_catalog_uses_every_eligible_item() {
        let mut known = KnownItems::new(1);
        known.insert(0, 0);
        known.insert(0, 1);
        let c = sample_eval_negatives(&known, 5, 0, 1, 99, 0);
        assert_eq!(c, vec![1, 2, 3, 4]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let known = KnownItems::new(3);
        let a = sample_eval_negatives(&known, 1000, 2, 0, 20, 9);
        let b = sample_eval_negatives(&known, 1000, 2, 0, 20, 9);
        assert_eq!(a, b);
    }
}
