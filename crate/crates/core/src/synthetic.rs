//! Latent-factor generators for multi-behavior logs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{split_leave_one_out, Interaction, InteractionStore, SplitOptions};
use crate::error::Result;
use crate::trainer::{user_pair_weights, Trainer, TrainingData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub factors: usize,
    /// Softmax temperature of item choice; lower is more concentrated.
    pub temperature: f64,
    pub views_per_user: usize,
    pub carts_per_user: usize,
    pub buys_per_user: usize,
    /// Probability that a purchase ignores the funnel and is drawn at random.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 300,
            factors: 8,
            temperature: 0.5,
            views_per_user: 20,
            carts_per_user: 8,
            buys_per_user: 4,
            noise: 0.1,
            seed: 0,
        }
    }
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<Vec<f64>> {
    // Box-Muller.
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect()
        })
        .collect()
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    -(-u.ln()).ln()
}

/// `n` distinct candidates drawn without replacement with probability
/// proportional to `exp(affinity / temperature)` (Gumbel top-k).
fn draw<R: Rng + ?Sized>(
    candidates: &[usize],
    affinity: &[f64],
    temperature: f64,
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| (affinity[i] / temperature + gumbel(rng), i))
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(n).map(|(_, i)| i).collect()
}

fn affinities(users: &[Vec<f64>], items: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let scale = 1.0 / (users.first().map_or(1, Vec::len) as f64).sqrt();
    users
        .iter()
        .map(|u| {
            items
                .iter()
                .map(|i| scale * u.iter().zip(i).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect()
}

fn store_from(
    users: usize,
    items: usize,
    behaviors: &[&str],
    target: usize,
    triples: Vec<Interaction>,
) -> InteractionStore {
    let timestamps = Some((0..triples.len() as i64).collect());
    InteractionStore {
        num_users: users,
        num_items: items,
        behaviors: behaviors.iter().map(|s| s.to_string()).collect(),
        target,
        triples,
        timestamps,
        user_ids: (0..users).map(|u| format!("u{u}")).collect(),
        item_ids: (0..items).map(|i| format!("i{i}")).collect(),
    }
}

/// A view → cart → buy funnel driven by shared latent preferences.
/// Behaviors are `view`, `cart`, `buy` with `buy` as target; timestamps follow
/// the funnel order within each user.
pub fn generate(cfg: &SyntheticConfig) -> InteractionStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let user_f = gaussian_matrix(cfg.users, cfg.factors, &mut rng);
    let item_f = gaussian_matrix(cfg.items, cfg.factors, &mut rng);
    let aff = affinities(&user_f, &item_f);
    let all: Vec<usize> = (0..cfg.items).collect();
    let mut triples = Vec::new();
    for (u, a) in aff.iter().enumerate() {
        let views = draw(&all, a, cfg.temperature, cfg.views_per_user.min(cfg.items), &mut rng);
        let carts = draw(&views, a, cfg.temperature, cfg.carts_per_user.min(views.len()), &mut rng);
        let mut buys = draw(&carts, a, cfg.temperature, cfg.buys_per_user.min(carts.len()), &mut rng);
        for b in buys.iter_mut() {
            if rng.gen::<f64>() < cfg.noise {
                *b = rng.gen_range(0..cfg.items);
            }
        }
        buys.sort_unstable();
        buys.dedup();
        buys.shuffle(&mut rng);
        triples.extend(views.iter().map(|&i| Interaction::new(u, i, 0)));
        triples.extend(carts.iter().map(|&i| Interaction::new(u, i, 1)));
        triples.extend(buys.iter().map(|&i| Interaction::new(u, i, 2)));
    }
    store_from(cfg.users, cfg.items, &["view", "cart", "buy"], 2, triples)
}

/// Target `buy` plus two auxiliary behaviors: `clean` follows each user's own
/// preferences, `noisy` holds the `clean` edges of a different user.
pub fn clean_noisy_store(users: usize, items: usize, seed: u64) -> InteractionStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_f = gaussian_matrix(users, 8, &mut rng);
    let item_f = gaussian_matrix(items, 8, &mut rng);
    let aff = affinities(&user_f, &item_f);
    let all: Vec<usize> = (0..items).collect();
    let clean: Vec<Vec<usize>> = aff
        .iter()
        .map(|a| draw(&all, a, 0.3, 16.min(items), &mut rng))
        .collect();
    // A cyclic shift of a random order: nobody keeps their own edges.
    let mut order: Vec<usize> = (0..users).collect();
    order.shuffle(&mut rng);
    let mut donor = vec![0; users];
    for (j, &u) in order.iter().enumerate() {
        donor[u] = order[(j + 1) % users];
    }
    let mut triples = Vec::new();
    for (u, a) in aff.iter().enumerate() {
        let buys = draw(&clean[u], a, 0.3, 5.min(clean[u].len()), &mut rng);
        triples.extend(clean[u].iter().map(|&i| Interaction::new(u, i, 0)));
        triples.extend(clean[donor[u]].iter().map(|&i| Interaction::new(u, i, 1)));
        triples.extend(buys.iter().map(|&i| Interaction::new(u, i, 2)));
    }
    store_from(users, items, &["clean", "noisy", "buy"], 2, triples)
}

pub fn training_data(store: &InteractionStore, opts: &SplitOptions) -> Result<TrainingData> {
    let split = split_leave_one_out(store, opts)?;
    Ok(TrainingData {
        num_users: store.num_users,
        num_items: store.num_items,
        behaviors: store.behaviors.clone(),
        target: store.target,
        split,
    })
}

/// Configuration used for the clean-versus-noisy comparison.
pub fn clean_noisy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        layers: 2,
        dim: 16,
        negative_samples: 64,
        temperature: 0.2,
        train_batch: 256,
        meta_batch: 128,
        base_lr: 1e-3,
        max_lr: 1e-2,
        lr_half_cycle: 50,
        dropout: 0.0,
        seed,
        ..TrainConfig::default()
    }
}

/// Mean learned contrastive weight of the clean and the noisy pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanNoisyOutcome {
    pub seed: u64,
    pub omega_clean: f64,
    pub omega_noisy: f64,
}

impl CleanNoisyOutcome {
    pub fn clean_wins(&self) -> bool {
        self.omega_clean > self.omega_noisy
    }
}

/// Trains the full model for `iterations` bilevel steps on the clean/noisy toy
/// and averages the per-user weights of each pair over all users.
pub fn run_clean_noisy(seed: u64, iterations: usize, cfg: &TrainConfig) -> Result<CleanNoisyOutcome> {
    let store = clean_noisy_store(120, 150, seed);
    let data = training_data(
        &store,
        &SplitOptions {
            meta_fraction: 0.2,
            seed,
            drop_auxiliary_of_test: false,
        },
    )?;
    let mut trainer = Trainer::new(cfg.clone(), &data)?;
    for _ in 0..iterations {
        trainer.step()?;
    }
    let rows = user_pair_weights(&trainer.graph, &trainer.model, &trainer.meta, data.target, cfg)?;
    let mean_of = |k: usize| {
        let v: Vec<f64> = rows.iter().filter(|r| r.1 == k).map(|r| r.2).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(CleanNoisyOutcome {
        seed,
        omega_clean: mean_of(0),
        omega_noisy: mean_of(1),
    })
}
