//! Per-behavior bipartite adjacency over users and items.

use std::sync::Arc;

use crate::data::{Interaction, InteractionStore};
use crate::error::Result;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone)]
pub struct BehaviorGraph {
    pub num_users: usize,
    pub num_items: usize,
    /// `A_k`, users × items, one per behavior.
    pub user_item: Vec<Arc<SparseMatrix>>,
    /// `A_kᵀ`, items × users.
    pub item_user: Vec<Arc<SparseMatrix>>,
    pub normalized: bool,
}

impl BehaviorGraph {
    /// Binary adjacency per behavior, optionally rescaled to
    /// `1 / sqrt(|N_u^k| · |N_i^k|)`. Nodes without neighbours keep empty rows.
    pub fn from_interactions<'a>(
        num_users: usize,
        num_items: usize,
        num_behaviors: usize,
        interactions: impl IntoIterator<Item = &'a Interaction>,
        normalize: bool,
    ) -> Result<Self> {
        let mut per_behavior: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); num_behaviors];
        for t in interactions {
            per_behavior[t.behavior].push((t.user, t.item, 1.0));
        }
        let mut user_item = Vec::with_capacity(num_behaviors);
        let mut item_user = Vec::with_capacity(num_behaviors);
        for entries in per_behavior {
            let mut a = SparseMatrix::from_triplets(num_users, num_items, &entries)?;
            if normalize {
                let user_deg: Vec<usize> = (0..num_users).map(|u| a.row_nnz(u)).collect();
                let mut item_deg = vec![0usize; num_items];
                for &(_, i, _) in &entries {
                    item_deg[i] += 1;
                }
                a = a.map_values(|u, i, _| 1.0 / ((user_deg[u] * item_deg[i]) as f64).sqrt());
            }
            item_user.push(Arc::new(a.transpose()));
            user_item.push(Arc::new(a));
        }
        Ok(Self {
            num_users,
            num_items,
            user_item,
            item_user,
            normalized: normalize,
        })
    }

    pub fn num_behaviors(&self) -> usize {
        self.user_item.len()
    }
}

/// Graph over every interaction in the store.
pub fn build_graph(store: &InteractionStore, normalize: bool) -> Result<BehaviorGraph> {
    BehaviorGraph::from_interactions(
        store.num_users,
        store.num_items,
        store.num_behaviors(),
        &store.triples,
        normalize,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(num_users: usize, num_items: usize, triples: Vec<Interaction>) -> InteractionStore {
        InteractionStore {
            num_users,
            num_items,
            behaviors: vec!["view".into(), "buy".into()],
            target: 1,
            triples,
            timestamps: None,
            user_ids: (0..num_users).map(|u| u.to_string()).collect(),
            item_ids: (0..num_items).map(|i| i.to_string()).collect(),
        }
    }

    #[test]
    fn single_triple_gives_single_unit_entry() {
        let g = build_graph(&store(1, 1, vec![Interaction::new(0, 0, 1)]), false).unwrap();
        assert_eq!(g.user_item[1].nnz(), 1);
        assert_eq!(g.user_item[1].to_dense().item(), 1.0);
        assert_eq!(g.user_item[0].nnz(), 0);
    }

    #[test]
    fn normalized_weight_for_degree_four_and_one() {
        let triples: Vec<_> = (0..4).map(|i| Interaction::new(0, i, 0)).collect();
        let g = build_graph(&store(1, 4, triples), true).unwrap();
        let (_, vals) = g.user_item[0].row(0);
        assert!(vals.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn row_sums_match_interaction_counts() {
        let triples = vec![
            Interaction::new(0, 0, 0),
            Interaction::new(0, 2, 0),
            Interaction::new(1, 1, 0),
            Interaction::new(2, 0, 1),
            Interaction::new(0, 1, 1),
        ];
        let s = store(3, 3, triples.clone());
        let g = build_graph(&s, false).unwrap();
        for k in 0..2 {
            let dense = g.user_item[k].to_dense();
            for u in 0..3 {
                let expected = triples.iter().filter(|t| t.user == u && t.behavior == k).count();
                assert_eq!(dense.row(u).iter().sum::<f64>(), expected as f64);
            }
            assert_eq!(g.item_user[k].to_dense(), dense.transpose());
        }
    }

    #[test]
    fn isolated_nodes_stay_empty_after_normalisation() {
        let g = build_graph(&store(3, 3, vec![Interaction::new(0, 0, 0)]), true).unwrap();
        assert_eq!(g.user_item[0].row_nnz(1), 0);
        assert_eq!(g.item_user[0].row_nnz(2), 0);
    }
}
