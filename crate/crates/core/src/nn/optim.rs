use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;

/// Adam with bias correction and optional decoupled-from-loss weight decay
/// (added to the gradient, as `torch.optim.Adam` does).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, grad)) in params.tensors_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

/// RMSProp in the `torch.optim.RMSprop` formulation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub weight_decay: f64,
    sq: Vec<Array2<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64, alpha: f64) -> Self {
        Self {
            lr,
            alpha,
            eps: 1e-8,
            weight_decay: 0.0,
            sq: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        if self.sq.is_empty() {
            self.sq = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        }
        for (i, (p, grad)) in params.tensors_mut().zip(grads).enumerate() {
            ndarray::Zip::from(p)
                .and(grad)
                .and(&mut self.sq[i])
                .for_each(|p, &g, s| {
                    let g = g + self.weight_decay * *p;
                    *s = self.alpha * *s + (1.0 - self.alpha) * g * g;
                    *p -= self.lr * g / (s.sqrt() + self.eps);
                });
        }
    }
}

/// Either optimizer, selected by configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    RmsProp(RmsProp),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        match self {
            Optimizer::Adam(o) => o.step(params, grads),
            Optimizer::RmsProp(o) => o.step(params, grads),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam(o) => o.lr,
            Optimizer::RmsProp(o) => o.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Adam(o) => o.lr = lr,
            Optimizer::RmsProp(o) => o.lr = lr,
        }
    }
}

/// Learning-rate reduction when a monitored loss stops improving.
///
/// A step counts as an improvement when `loss < best · (1 − tolerance)`.
/// After `patience` consecutive non-improving steps the rate is multiplied
/// by `factor`, never going below `floor`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub tolerance: f64,
    pub floor: f64,
    lr: f64,
    best: f64,
    bad_steps: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, tolerance: f64, floor: f64) -> Self {
        Self {
            factor,
            patience,
            tolerance,
            floor,
            lr: initial_lr,
            best: f64::INFINITY,
            bad_steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one monitored value; returns the (possibly reduced) rate.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.tolerance) {
            self.best = loss;
            self.bad_steps = 0;
        } else {
            self.bad_steps += 1;
            if self.bad_steps >= self.patience {
                self.lr = (self.lr * self.factor).max(self.floor);
                self.bad_steps = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        ps.add("w", array![[1.0, -1.0]]);
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        opt.step(&mut ps, &[array![[2.0, -3.0]]]);
        let w = ps.get(0);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn rmsprop_first_step() {
        let mut ps = ParamSet::new();
        ps.add("w", array![[0.0]]);
        let mut opt = RmsProp::new(0.01, 0.99);
        opt.step(&mut ps, &[array![[1.0]]]);
        // s = 0.01, step = 0.01 * 1 / 0.1
        assert!((ps.get(0)[[0, 0]] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn plateau_reduces_by_factor_after_patience() {
        let mut s = PlateauScheduler::new(0.01, 0.2, 1000, 1e-4, 1e-4);
        s.observe(1.0);
        for _ in 0..999 {
            assert_eq!(s.observe(1.0), 0.01);
        }
        assert!((s.observe(1.0) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn plateau_never_passes_floor_and_is_monotone() {
        let mut s = PlateauScheduler::new(0.01, 0.2, 3, 1e-4, 1e-4);
        let mut prev = s.lr();
        for _ in 0..100 {
            let lr = s.observe(5.0);
            assert!(lr <= prev);
            assert!(lr >= 1e-4);
            prev = lr;
        }
        assert_eq!(prev, 1e-4);
    }

    #[test]
    fn improvements_reset_patience() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 2, 1e-4, 0.0);
        let mut loss = 10.0;
        for _ in 0..20 {
            loss *= 0.9;
            assert_eq!(s.observe(loss), 1.0);
        }
    }
}
