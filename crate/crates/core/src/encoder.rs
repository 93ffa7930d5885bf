//! Behavior-aware graph encoder.
//!
//! At every layer the aggregated user/item tables are pushed through each
//! behavior's adjacency separately (neighbourhood sums), the `K` results are
//! averaged, multiplied by the layer transform and passed through a PReLU.
//! Final embeddings average the aggregated tables of layers `0..=L`; the
//! behavior-specific embeddings average that behavior's propagated tables of
//! layers `1..=L`.

use serde::{Deserialize, Serialize};

use crate::error::{CmlError, Result};
use crate::graph::BehaviorGraph;
use crate::model::{ModelParams, ModelVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub user_final: Var,
    pub item_final: Var,
    /// Behavior-specific final user embeddings, indexed by behavior.
    pub user_behavior: Vec<Var>,
    pub item_behavior: Vec<Var>,
    /// Aggregated tables, layer 0 first.
    pub user_layers: Vec<Var>,
    pub item_layers: Vec<Var>,
    /// `[layer - 1][behavior]` propagated tables for layers `1..=L`.
    pub user_behavior_layers: Vec<Vec<Var>>,
    pub item_behavior_layers: Vec<Vec<Var>>,
}

/// One propagation step for behavior `k`: users gather their items, items
/// gather their users.
pub fn propagate_behavior(
    tape: &mut Tape,
    graph: &BehaviorGraph,
    k: usize,
    user_in: Var,
    item_in: Var,
) -> Result<(Var, Var)> {
    let user_out = tape.spmm(&graph.user_item[k], item_in)?;
    let item_out = tape.spmm(&graph.item_user[k], user_in)?;
    Ok((user_out, item_out))
}

/// `PReLU(mean_k(parts) · W)`.
pub fn aggregate_behaviors(
    tape: &mut Tape,
    parts: &[Var],
    transform: Var,
    slope: Var,
) -> Result<Var> {
    let mean = tape.mean_of(parts)?;
    let lin = tape.matmul(mean, transform)?;
    tape.prelu(lin, slope)
}

pub fn encode(tape: &mut Tape, graph: &BehaviorGraph, vars: &ModelVars) -> Result<EncoderOutput> {
    let layers = vars.transforms.len();
    if layers == 0 {
        return Err(CmlError::config("layers", "must be at least 1"));
    }
    let [nu, _] = tape.shape(vars.user_emb);
    let [ni, _] = tape.shape(vars.item_emb);
    if nu != graph.num_users || ni != graph.num_items {
        return Err(CmlError::Shape(format!(
            "embedding tables {nu}x_, {ni}x_ do not match graph with {} users, {} items",
            graph.num_users, graph.num_items
        )));
    }
    let k_count = graph.num_behaviors();
    let mut user_layers = vec![vars.user_emb];
    let mut item_layers = vec![vars.item_emb];
    let mut user_behavior_layers = Vec::with_capacity(layers);
    let mut item_behavior_layers = Vec::with_capacity(layers);
    for l in 0..layers {
        let (u_in, i_in) = (user_layers[l], item_layers[l]);
        let mut u_parts = Vec::with_capacity(k_count);
        let mut i_parts = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let (u, i) = propagate_behavior(tape, graph, k, u_in, i_in)?;
            u_parts.push(u);
            i_parts.push(i);
        }
        let w = vars.transforms[l];
        let a = vars.slopes[l];
        user_layers.push(aggregate_behaviors(tape, &u_parts, w, a)?);
        item_layers.push(aggregate_behaviors(tape, &i_parts, w, a)?);
        user_behavior_layers.push(u_parts);
        item_behavior_layers.push(i_parts);
    }
    let user_final = tape.mean_of(&user_layers)?;
    let item_final = tape.mean_of(&item_layers)?;
    let mut user_behavior = Vec::with_capacity(k_count);
    let mut item_behavior = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let us: Vec<Var> = user_behavior_layers.iter().map(|l| l[k]).collect();
        let is: Vec<Var> = item_behavior_layers.iter().map(|l| l[k]).collect();
        user_behavior.push(tape.mean_of(&us)?);
        item_behavior.push(tape.mean_of(&is)?);
    }
    Ok(EncoderOutput {
        user_final,
        item_final,
        user_behavior,
        item_behavior,
        user_layers,
        item_layers,
        user_behavior_layers,
        item_behavior_layers,
    })
}

/// Detached snapshot of every table produced by the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingState {
    pub user_final: Tensor,
    pub item_final: Tensor,
    pub user_behavior: Vec<Tensor>,
    pub item_behavior: Vec<Tensor>,
    pub user_layers: Vec<Tensor>,
    pub item_layers: Vec<Tensor>,
    pub user_behavior_layers: Vec<Vec<Tensor>>,
    pub item_behavior_layers: Vec<Vec<Tensor>>,
}

impl EmbeddingState {
    pub fn compute(graph: &BehaviorGraph, params: &ModelParams) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let out = encode(&mut tape, graph, &vars)?;
        Ok(Self::from_output(&tape, &out))
    }

    pub fn from_output(tape: &Tape, out: &EncoderOutput) -> Self {
        let get = |v: &Var| tape.value(*v).clone();
        Self {
            user_final: get(&out.user_final),
            item_final: get(&out.item_final),
            user_behavior: out.user_behavior.iter().map(get).collect(),
            item_behavior: out.item_behavior.iter().map(get).collect(),
            user_layers: out.user_layers.iter().map(get).collect(),
            item_layers: out.item_layers.iter().map(get).collect(),
            user_behavior_layers: out
                .user_behavior_layers
                .iter()
                .map(|l| l.iter().map(get).collect())
                .collect(),
            item_behavior_layers: out
                .item_behavior_layers
                .iter()
                .map(|l| l.iter().map(get).collect())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.user_final.cols()
    }

    pub fn num_users(&self) -> usize {
        self.user_final.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_final.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.user_final.is_finite()
            && self.item_final.is_finite()
            && self.user_behavior.iter().all(Tensor::is_finite)
            && self.item_behavior.iter().all(Tensor::is_finite)
    }
}
