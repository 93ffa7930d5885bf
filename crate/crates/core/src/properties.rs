//! Property tests spanning several modules.

use std::collections::BTreeMap;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{infonce_pair, ContrastiveBatch};
use crate::eval::{evaluate_with, hit_and_ndcg, rank_of_first, KnownItems};
use crate::trainer::{bpr_per_sample, BprSample, CyclicLr};
use crate::{Protocol, Similarity, SparseMatrix, Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #[test]
    fn ndcg_never_exceeds_hit(rank in 1usize..200, k in 1usize..50) {
        let (hit, ndcg) = hit_and_ndcg(rank, k);
        prop_assert!(ndcg <= f64::from(u8::from(hit)));
        prop_assert!(ndcg >= 0.0);
        prop_assert_eq!(hit, rank <= k);
    }

    #[test]
    fn rank_ignores_negative_order(scores in prop::collection::vec(-5.0f64..5.0, 2..30), seed in 0u64..100) {
        let candidates: Vec<usize> = (0..scores.len()).collect();
        let r = rank_of_first(&candidates, &scores);
        let mut perm: Vec<usize> = (1..scores.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let c2: Vec<usize> = std::iter::once(0).chain(perm.iter().copied()).collect();
        let s2: Vec<f64> = c2.iter().map(|&i| scores[i]).collect();
        prop_assert_eq!(rank_of_first(&c2, &s2), r);
    }

    #[test]
    fn metrics_are_invariant_to_monotone_rescaling(seed in 0u64..50, scale in 0.1f64..10.0, shift in -3.0f64..3.0) {
        let (users, items) = (12, 40);
        let table = Tensor::xavier_uniform(users + items, 4, &mut ChaCha8Rng::seed_from_u64(seed));
        let score = |u: usize, i: usize| -> f64 {
            table.row(u).iter().zip(table.row(users + i)).map(|(a, b)| a * b).sum()
        };
        let positives: BTreeMap<usize, usize> = (0..users).map(|u| (u, (u * 3) % items)).collect();
        let known = KnownItems::new(users);
        let run = |f: &(dyn Fn(usize, usize) -> f64 + Sync)| {
            evaluate_with(&positives, &known, users, items, Protocol::Sampled { negatives: 20 }, 5, seed, f)
        };
        let base = run(&score);
        let moved = run(&|u, i| scale * score(u, i) + shift);
        prop_assert_eq!(base.hr, moved.hr);
        prop_assert_eq!(base.ndcg, moved.ndcg);
        prop_assert!(base.ndcg <= base.hr);
        prop_assert!((0.0..=1.0).contains(&base.hr));
    }

    #[test]
    fn infonce_is_non_negative(t in matrix(5, 3), a in matrix(5, 3), negs in prop::collection::vec(0usize..5, 1..8)) {
        let mut tape = Tape::new();
        let tv = tape.constant(t);
        let av = tape.constant(a);
        let batch = ContrastiveBatch::new(vec![0, 2, 4], negs, 0.3).unwrap();
        for sim in [Similarity::Cosine, Similarity::Dot] {
            let (_, per) = infonce_pair(&mut tape, tv, av, &batch, sim).unwrap();
            prop_assert!(tape.value(per).data().iter().all(|&l| l >= -1e-12));
        }
    }

    #[test]
    fn bpr_swap_identity(u in matrix(1, 4), items in matrix(2, 4)) {
        let mut tape = Tape::new();
        let uv = tape.constant(u.clone());
        let iv = tape.constant(items.clone());
        let fwd = BprSample { user: 0, pos: 0, neg: 1, behavior: 0 };
        let rev = BprSample { user: 0, pos: 1, neg: 0, behavior: 0 };
        let out = bpr_per_sample(&mut tape, uv, iv, &[fwd, rev]).unwrap();
        let margin: f64 = (0..4).map(|j| u.get(0, j) * (items.get(0, j) - items.get(1, j))).sum();
        let v = tape.value(out);
        assert_relative_eq!(v.get(1, 0) - v.get(0, 0), margin, epsilon = 1e-12);
    }

    #[test]
    fn spmm_matches_dense(cells in prop::collection::btree_map((0usize..6, 0usize..5), 0.0f64..1.0, 0..20), d in matrix(5, 3)) {
        let entries: Vec<(usize, usize, f64)> = cells.into_iter().map(|((r, c), v)| (r, c, v)).collect();
        let s = SparseMatrix::from_triplets(6, 5, &entries).unwrap();
        let sparse = s.spmm(&d).unwrap();
        let dense = s.to_dense().matmul(&d).unwrap();
        for (a, b) in sparse.data().iter().zip(dense.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let back = s.t_spmm(&sparse).unwrap();
        let dense_back = s.to_dense().transpose().matmul(&dense).unwrap();
        for (a, b) in back.data().iter().zip(dense_back.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_of_gather_sum_counts_occurrences(idx in prop::collection::vec(0usize..4, 1..12)) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(4, 2, 1.0));
        let g = tape.gather(x, &idx).unwrap();
        let s = tape.sum(g);
        let grads = tape.backward(s).unwrap().wrt(x);
        for r in 0..4 {
            let n = idx.iter().filter(|&&i| i == r).count() as f64;
            prop_assert_eq!(grads.row(r), &[n, n][..]);
        }
    }

    #[test]
    fn cyclic_lr_stays_in_band(base in 1e-5f64..1e-3, extra in 0.0f64..1e-2, half in 1usize..60, it in 0usize..1000) {
        let s = CyclicLr::new(base, base + extra, half);
        let lr = s.at(it);
        prop_assert!(lr >= base - 1e-15 && lr <= base + extra + 1e-15);
        assert_relative_eq!(lr, s.at(it + s.cycle_length()), epsilon = 1e-15);
    }
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(20_000, 1, 1.0));
    let kept = tape.dropout(x, 0.3, true, &mut rng).unwrap();
    let mean = tape.value(kept).sum() / 20_000.0;
    assert_relative_eq!(mean, 1.0, epsilon = 0.03);
    let eval = tape.dropout(x, 0.3, false, &mut rng).unwrap();
    assert_eq!(tape.value(eval), tape.value(x));
}
