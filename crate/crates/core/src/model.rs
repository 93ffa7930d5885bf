//! Learnable parameters of the graph model and of the meta weight network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// PReLU slope at initialisation.
const INIT_SLOPE: f64 = 0.25;
/// Per-head bias at initialisation; the two heads sum to a weight of 1.
const INIT_HEAD_BIAS: f64 = 0.5;

fn leaf(tape: &mut Tape, t: &Tensor, learn: bool) -> Var {
    if learn {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Uniform access to a parameter set as an ordered list of tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `self += c * delta`, `delta` in [`Parameters::tensors`] order.
    fn axpy(&mut self, c: f64, delta: &[Tensor]) {
        for (p, d) in self.tensors_mut().into_iter().zip(delta) {
            p.axpy(c, d);
        }
    }
}

/// Graph model parameters: layer-0 embeddings and one transform per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub user_emb: Tensor,
    pub item_emb: Tensor,
    /// `W^l`, `d × d`, applied on the right of row embeddings.
    pub transforms: Vec<Tensor>,
    /// PReLU slope of each layer, `1 × 1`.
    pub slopes: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub user_emb: Var,
    pub item_emb: Var,
    pub transforms: Vec<Var>,
    pub slopes: Vec<Var>,
}

impl ModelVars {
    /// Inverse of [`ModelVars::leaves`] for a model with `layers` layers.
    pub fn from_leaves(leaves: &[Var], layers: usize) -> Self {
        assert_eq!(leaves.len(), 2 + 2 * layers, "leaf count");
        Self {
            user_emb: leaves[0],
            item_emb: leaves[1],
            transforms: leaves[2..2 + layers].to_vec(),
            slopes: leaves[2 + layers..].to_vec(),
        }
    }

    pub fn leaves(&self) -> Vec<Var> {
        let mut v = vec![self.user_emb, self.item_emb];
        v.extend(&self.transforms);
        v.extend(&self.slopes);
        v
    }
}

impl ModelParams {
    /// Xavier-uniform embeddings and transforms.
    pub fn init<R: Rng + ?Sized>(
        num_users: usize,
        num_items: usize,
        dim: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let user_emb = Tensor::xavier_uniform(num_users, dim, rng);
        let item_emb = Tensor::xavier_uniform(num_items, dim, rng);
        let transforms = (0..layers)
            .map(|_| Tensor::xavier_uniform(dim, dim, rng))
            .collect();
        let slopes = (0..layers).map(|_| Tensor::scalar(INIT_SLOPE)).collect();
        Self {
            user_emb,
            item_emb,
            transforms,
            slopes,
        }
    }

    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn layers(&self) -> usize {
        self.transforms.len()
    }

    /// Registers every tensor as a learnable leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        self.register_with(tape, true)
    }

    /// Registers every tensor as a constant (inference).
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelVars {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, learn: bool) -> ModelVars {
        let mut reg = |t: &Tensor| leaf(tape, t, learn);
        ModelVars {
            user_emb: reg(&self.user_emb),
            item_emb: reg(&self.item_emb),
            transforms: self.transforms.iter().map(&mut reg).collect(),
            slopes: self.slopes.iter().map(&mut reg).collect(),
        }
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.user_emb, &self.item_emb];
        v.extend(&self.transforms);
        v.extend(&self.slopes);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.user_emb, &mut self.item_emb];
        v.extend(&mut self.transforms);
        v.extend(&mut self.slopes);
        v
    }
}

/// One weighting function pair `ξ1`, `ξ2`: a linear map to a scalar, a bias
/// and a PReLU, for the `3d`-wide and `2d`-wide meta-knowledge respectively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub slope1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub slope2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub slope1: Var,
    pub w2: Var,
    pub b2: Var,
    pub slope2: Var,
}

impl WeightHead {
    /// Zero projection and biases of 0.5, so every weight starts at exactly 1.
    pub fn init(dim: usize) -> Self {
        Self {
            w1: Tensor::zeros(3 * dim, 1),
            b1: Tensor::scalar(INIT_HEAD_BIAS),
            slope1: Tensor::scalar(INIT_SLOPE),
            w2: Tensor::zeros(2 * dim, 1),
            b2: Tensor::scalar(INIT_HEAD_BIAS),
            slope2: Tensor::scalar(INIT_SLOPE),
        }
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.slope1, &self.w2, &self.b2, &self.slope2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.slope1,
            &mut self.w2,
            &mut self.b2,
            &mut self.slope2,
        ]
    }

    fn register(&self, tape: &mut Tape, learn: bool) -> HeadVars {
        let mut reg = |t: &Tensor| leaf(tape, t, learn);
        HeadVars {
            w1: reg(&self.w1),
            b1: reg(&self.b1),
            slope1: reg(&self.slope1),
            w2: reg(&self.w2),
            b2: reg(&self.b2),
            slope2: reg(&self.slope2),
        }
    }
}

impl HeadVars {
    fn from_leaves(v: &[Var]) -> Self {
        Self {
            w1: v[0],
            b1: v[1],
            slope1: v[2],
            w2: v[3],
            b2: v[4],
            slope2: v[5],
        }
    }

    fn leaves(&self) -> [Var; 6] {
        [self.w1, self.b1, self.slope1, self.w2, self.b2, self.slope2]
    }
}

/// Parameters of the meta weight network. `contrastive` weights the InfoNCE
/// terms, `bpr` the ranking terms; both heads are shared across behavior pairs.
/// The gates are only used by the scalar-gate ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub contrastive: WeightHead,
    pub bpr: WeightHead,
    /// One `1 × 1` gate per behavior for its contrastive pair with the target.
    pub contrastive_gates: Vec<Tensor>,
    /// One `1 × 1` gate per behavior for its BPR term.
    pub bpr_gates: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct MetaVars {
    pub contrastive: HeadVars,
    pub bpr: HeadVars,
    pub contrastive_gates: Vec<Var>,
    pub bpr_gates: Vec<Var>,
}

impl MetaVars {
    /// Inverse of [`MetaVars::leaves`] for `num_behaviors` gates per kind.
    pub fn from_leaves(leaves: &[Var], num_behaviors: usize) -> Self {
        assert_eq!(leaves.len(), 12 + 2 * num_behaviors, "leaf count");
        Self {
            contrastive: HeadVars::from_leaves(&leaves[0..6]),
            bpr: HeadVars::from_leaves(&leaves[6..12]),
            contrastive_gates: leaves[12..12 + num_behaviors].to_vec(),
            bpr_gates: leaves[12 + num_behaviors..].to_vec(),
        }
    }

    pub fn leaves(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.contrastive.leaves().to_vec();
        v.extend(self.bpr.leaves());
        v.extend(&self.contrastive_gates);
        v.extend(&self.bpr_gates);
        v
    }
}

impl MetaParams {
    pub fn init(dim: usize, num_behaviors: usize) -> Self {
        Self {
            contrastive: WeightHead::init(dim),
            bpr: WeightHead::init(dim),
            contrastive_gates: vec![Tensor::scalar(1.0); num_behaviors],
            bpr_gates: vec![Tensor::scalar(1.0); num_behaviors],
        }
    }

    pub fn register(&self, tape: &mut Tape) -> MetaVars {
        self.register_with(tape, true)
    }

    pub fn register_frozen(&self, tape: &mut Tape) -> MetaVars {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, learn: bool) -> MetaVars {
        MetaVars {
            contrastive: self.contrastive.register(tape, learn),
            bpr: self.bpr.register(tape, learn),
            contrastive_gates: self
                .contrastive_gates
                .iter()
                .map(|g| leaf(tape, g, learn))
                .collect(),
            bpr_gates: self.bpr_gates.iter().map(|g| leaf(tape, g, learn)).collect(),
        }
    }
}

impl Parameters for MetaParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.contrastive.tensors().to_vec();
        v.extend(self.bpr.tensors());
        v.extend(&self.contrastive_gates);
        v.extend(&self.bpr_gates);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.contrastive.tensors_mut().into_iter().collect();
        v.extend(self.bpr.tensors_mut());
        v.extend(&mut self.contrastive_gates);
        v.extend(&mut self.bpr_gates);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaf_order_matches_tensor_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelParams::init(3, 4, 2, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        for (leaf, t) in vars.leaves().iter().zip(model.tensors()) {
            assert_eq!(tape.value(*leaf), t);
        }
        let meta = MetaParams::init(2, 3);
        let mvars = meta.register(&mut tape);
        assert_eq!(mvars.leaves().len(), meta.tensors().len());
        for (leaf, t) in mvars.leaves().iter().zip(meta.tensors()) {
            assert_eq!(tape.value(*leaf), t);
        }
    }
}
