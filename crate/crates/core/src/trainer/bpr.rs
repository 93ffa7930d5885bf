//! Pairwise ranking loss, scoring and triple sampling.

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::encoder::EmbeddingState;
use crate::error::{CmlError, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BprSample {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
    pub behavior: usize,
}

/// Dot product of the final user and item embeddings.
pub fn score(state: &EmbeddingState, user: usize, item: usize) -> Result<f64> {
    if user >= state.num_users() || item >= state.num_items() {
        return Err(CmlError::Contract(format!(
            "score({user}, {item}) out of range for {} users, {} items",
            state.num_users(),
            state.num_items()
        )));
    }
    Ok(state
        .user_final
        .row(user)
        .iter()
        .zip(state.item_final.row(item))
        .map(|(a, b)| a * b)
        .sum())
}

/// `B × 1` vector of `−ln σ(x̂⁺ − x̂⁻)`.
pub fn bpr_per_sample(
    tape: &mut Tape,
    user_table: Var,
    item_table: Var,
    samples: &[BprSample],
) -> Result<Var> {
    if samples.is_empty() {
        return Err(CmlError::Contract("empty BPR batch".into()));
    }
    let users: Vec<usize> = samples.iter().map(|s| s.user).collect();
    let pos: Vec<usize> = samples.iter().map(|s| s.pos).collect();
    let neg: Vec<usize> = samples.iter().map(|s| s.neg).collect();
    let u = tape.gather(user_table, &users)?;
    let p = tape.gather(item_table, &pos)?;
    let n = tape.gather(item_table, &neg)?;
    let sp = tape.row_dot(u, p)?;
    let sn = tape.row_dot(u, n)?;
    let margin = tape.sub(sp, sn)?;
    let ls = tape.log_sigmoid(margin);
    Ok(tape.scale(ls, -1.0))
}

/// `λ · Σ ‖θ‖²` over `params`.
pub fn l2_penalty(tape: &mut Tape, params: &[Var], l2: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in params {
        let sq = tape.mul(p, p)?;
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let total = acc.ok_or_else(|| CmlError::Contract("no parameters to regularise".into()))?;
    Ok(tape.scale(total, l2))
}

/// Summed BPR loss plus the L2 term, and the per-sample vector without it.
pub fn bpr_loss(
    tape: &mut Tape,
    user_table: Var,
    item_table: Var,
    samples: &[BprSample],
    l2: f64,
    params: &[Var],
) -> Result<(Var, Var)> {
    let per = bpr_per_sample(tape, user_table, item_table, samples)?;
    let sum = tape.sum(per);
    let total = if params.is_empty() || l2 == 0.0 {
        sum
    } else {
        let reg = l2_penalty(tape, params, l2)?;
        tape.add(sum, reg)?
    };
    Ok((total, per))
}

/// Draws `(u, i⁺, i⁻)` triples for one behavior. Positives are uniform over
/// the pool; negatives are uniform over items outside the user's known set.
#[derive(Debug, Clone)]
pub struct BprSampler {
    behavior: usize,
    num_items: usize,
    pool: Vec<(usize, usize)>,
    /// Sorted known items per user.
    known: Vec<Vec<usize>>,
    /// Pool indices whose user still has at least one negative.
    usable: usize,
}

impl BprSampler {
    /// `pool` supplies positives, `known` every `(u, i)` of this behavior the
    /// model may not use as a negative. Both are filtered to `behavior`.
    pub fn new<'a, 'b>(
        behavior: usize,
        num_users: usize,
        num_items: usize,
        pool: impl IntoIterator<Item = &'a Interaction>,
        known: impl IntoIterator<Item = &'b Interaction>,
    ) -> Result<Self> {
        let pool: Vec<(usize, usize)> = pool
            .into_iter()
            .filter(|t| t.behavior == behavior)
            .map(|t| (t.user, t.item))
            .collect();
        if pool.is_empty() {
            return Err(CmlError::Data(format!("behavior {behavior} has no training interactions")));
        }
        let mut per_user = vec![Vec::new(); num_users];
        for t in known.into_iter().filter(|t| t.behavior == behavior) {
            per_user[t.user].push(t.item);
        }
        for &(u, i) in &pool {
            per_user[u].push(i);
        }
        for items in &mut per_user {
            items.sort_unstable();
            items.dedup();
        }
        let usable = pool
            .iter()
            .filter(|&&(u, _)| per_user[u].len() < num_items)
            .count();
        if usable == 0 {
            return Err(CmlError::Data(format!(
                "behavior {behavior}: every user has interacted with all items, no negatives exist"
            )));
        }
        Ok(Self {
            behavior,
            num_items,
            pool,
            known: per_user,
            usable,
        })
    }

    pub fn behavior(&self) -> usize {
        self.behavior
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn is_known(&self, user: usize, item: usize) -> bool {
        self.known
            .get(user)
            .is_some_and(|v| v.binary_search(&item).is_ok())
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<BprSample> {
        let mut out = Vec::with_capacity(count);
        let mut resampled = 0usize;
        while out.len() < count {
            let (user, pos) = self.pool[rng.gen_range(0..self.pool.len())];
            if self.known[user].len() >= self.num_items {
                resampled += 1;
                continue;
            }
            let neg = loop {
                let j = rng.gen_range(0..self.num_items);
                if !self.is_known(user, j) {
                    break j;
                }
            };
            out.push(BprSample {
                user,
                pos,
                neg,
                behavior: self.behavior,
            });
        }
        if resampled > 0 {
            debug!(
                "behavior {}: resampled {resampled} positives of saturated users ({} of {} usable)",
                self.behavior,
                self.usable,
                self.pool.len()
            );
            if self.usable * 2 < self.pool.len() {
                warn!("behavior {}: most users have no negative items", self.behavior);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(users: Vec<Vec<f64>>, items: Vec<Vec<f64>>) -> EmbeddingState {
        let u = Tensor::from_rows(&users);
        let i = Tensor::from_rows(&items);
        EmbeddingState {
            user_final: u.clone(),
            item_final: i.clone(),
            user_behavior: vec![u.clone()],
            item_behavior: vec![i.clone()],
            user_layers: vec![u],
            item_layers: vec![i],
            user_behavior_layers: vec![],
            item_behavior_layers: vec![],
        }
    }

    #[test]
    fn score_is_dot_product() {
        let s = state(vec![vec![1.0, 2.0], vec![0.0, 0.0]], vec![vec![3.0, -1.0]]);
        assert_eq!(score(&s, 0, 0).unwrap(), 1.0);
        assert_eq!(score(&s, 1, 0).unwrap(), 0.0);
        assert!(score(&s, 2, 0).is_err());
        assert!(score(&s, 0, 1).is_err());
    }

    #[test]
    fn zero_margin_is_ln_two() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]));
        let i = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]));
        let s = [BprSample { user: 0, pos: 0, neg: 1, behavior: 0 }];
        let per = bpr_per_sample(&mut tape, u, i, &s).unwrap();
        assert!((tape.value(per).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn large_margin_saturates() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_rows(&[vec![1.0]]));
        let i = tape.constant(Tensor::from_rows(&[vec![10.0], vec![-10.0]]));
        let s = [BprSample { user: 0, pos: 0, neg: 1, behavior: 0 }];
        let per = bpr_per_sample(&mut tape, u, i, &s).unwrap();
        assert!(tape.value(per).item() < 1e-8);
    }

    #[test]
    fn regulariser_is_added_to_the_sum_only() {
        let mut tape = Tape::new();
        let u = tape.param(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let i = tape.param(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let s = [BprSample { user: 0, pos: 0, neg: 1, behavior: 0 }];
        let (total, per) = bpr_loss(&mut tape, u, i, &s, 0.5, &[u, i]).unwrap();
        let expected_per = (1.0 + 1f64.exp()).ln();
        assert!((tape.value(per).item() - expected_per).abs() < 1e-12);
        assert!((tape.value(total).item() - expected_per - 0.5 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn forced_negative() {
        let pool = [Interaction::new(0, 0, 0)];
        let s = BprSampler::new(0, 1, 2, &pool, &pool).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(s.sample(50, &mut rng).iter().all(|b| b.neg == 1 && b.pos == 0));
    }

    #[test]
    fn saturated_users_are_resampled() {
        let pool = [
            Interaction::new(0, 0, 0),
            Interaction::new(0, 1, 0),
            Interaction::new(1, 0, 0),
        ];
        let s = BprSampler::new(0, 2, 2, &pool, &pool).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = s.sample(40, &mut rng);
        assert!(batch.iter().all(|b| b.user == 1 && b.neg == 1));
    }

    #[test]
    fn no_negatives_anywhere_is_an_error() {
        let pool = [Interaction::new(0, 0, 0)];
        assert!(matches!(BprSampler::new(0, 1, 1, &pool, &pool), Err(CmlError::Data(_))));
        assert!(matches!(BprSampler::new(1, 1, 1, &pool, &pool), Err(CmlError::Data(_))));
    }

    #[test]
    fn seeded_sampling_repeats() {
        let pool: Vec<_> = (0..20).map(|j| Interaction::new(j % 4, j, 0)).collect();
        let s = BprSampler::new(0, 4, 30, &pool, &pool).unwrap();
        let a = s.sample(64, &mut ChaCha8Rng::seed_from_u64(11));
        let b = s.sample(64, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }
}
