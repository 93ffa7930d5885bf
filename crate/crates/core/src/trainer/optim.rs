//! AdamW with decoupled weight decay and a triangular cyclical learning rate.

use serde::{Deserialize, Serialize};

use crate::model::Parameters;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new<P: Parameters + ?Sized>(params: &P, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// `θ ← θ·(1 − lr·wd) − lr · m̂ / (√v̂ + ε)`; gradients in [`Parameters::tensors`] order.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = g.data()[j];
                md[j] = b1 * md[j] + (1.0 - b1) * gj;
                vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
                let update = (md[j] / c1) / ((vd[j] / c2).sqrt() + eps);
                pd[j] = pd[j] * decay - lr * update;
            }
        }
    }
}

/// Triangular schedule rising linearly from `base` to `max` over `half_cycle`
/// iterations and falling back over the next `half_cycle`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub base: f64,
    pub max: f64,
    pub half_cycle: usize,
}

impl CyclicLr {
    pub fn new(base: f64, max: f64, half_cycle: usize) -> Self {
        debug_assert!(base <= max && half_cycle > 0);
        Self {
            base,
            max,
            half_cycle,
        }
    }

    pub fn cycle_length(&self) -> usize {
        2 * self.half_cycle
    }

    pub fn at(&self, iteration: usize) -> f64 {
        let pos = iteration % self.cycle_length();
        let rising = pos.min(self.cycle_length() - pos);
        self.base + (self.max - self.base) * rising as f64 / self.half_cycle as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Single(Tensor);

    impl Parameters for Single {
        fn tensors(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradients_decay_exactly() {
        let mut p = Single(Tensor::column(vec![1.0, -2.0, 0.5]));
        let mut opt = AdamW::new(&p, 0.1);
        let (lr, wd) = (0.01, 0.1);
        let zero = vec![Tensor::zeros(3, 1)];
        let mut expected = p.0.clone();
        for _ in 0..5 {
            opt.step(&mut p, &zero, lr);
            expected = expected.map(|v| v * (1.0 - lr * wd));
            assert_eq!(p.0, expected);
        }
    }

    #[test]
    fn step_on_quadratic_descends() {
        // f(x) = (x - 3)^2
        let mut p = Single(Tensor::scalar(0.0));
        let mut opt = AdamW::new(&p, 0.0);
        let f = |x: f64| (x - 3.0).powi(2);
        let before = f(p.0.item());
        let g = vec![Tensor::scalar(2.0 * (p.0.item() - 3.0))];
        opt.step(&mut p, &g, 1e-3);
        assert!(f(p.0.item()) < before);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut p = Single(Tensor::column(vec![1.0, 2.0]));
        let mut opt = AdamW::new(&p, 0.01);
        opt.step(&mut p, &[Tensor::column(vec![5.0, -5.0])], 0.0);
        assert_eq!(p.0, Tensor::column(vec![1.0, 2.0]));
    }

    #[test]
    fn cyclic_schedule_bounds_and_period() {
        let s = CyclicLr::new(1e-4, 1e-3, 7);
        for t in 0..200 {
            let lr = s.at(t);
            assert!((1e-4..=1e-3).contains(&lr));
            assert_eq!(lr, s.at(t + s.cycle_length()));
        }
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(7), 1e-3);
        assert!(s.at(3) < s.at(4));
        assert!(s.at(10) > s.at(11));
    }
}
