//! Adaptive-moment gradient descent over named parameter tensors.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;
use crate::nn::Params;

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Moments<S: Scalar> {
    pub m: ArrayD<S>,
    pub v: ArrayD<S>,
}

/// Adam over everything a [`Params`] implementor exposes, with slots keyed
/// by parameter name so optimizer state can be checkpointed alongside the
/// parameters. A tensor whose gradient stays exactly zero is never moved:
/// both moments remain zero, so the update is exactly zero too.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    slots: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// One update from the gradients currently accumulated in `model`.
    pub fn step<M: Params<S>>(&mut self, model: &mut M) {
        self.t += 1;
        let lr = S::from_f64(self.lr);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let eps = S::from_f64(self.eps);
        let c1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let c2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let slots = &mut self.slots;
        model.visit_params(&mut |name, mut p, g| {
            let slot = slots.entry(name.to_string()).or_insert_with(|| Moments {
                m: ArrayD::zeros(p.raw_dim()),
                v: ArrayD::zeros(p.raw_dim()),
            });
            assert_eq!(slot.m.raw_dim(), p.raw_dim(), "slot shape drift for {name}");
            ndarray::Zip::from(&mut p)
                .and(&g.view())
                .and(&mut slot.m)
                .and(&mut slot.v)
                .for_each(|pv, &gv, mv, vv| {
                    *mv = b1 * *mv + (one - b1) * gv;
                    *vv = b2 * *vv + (one - b2) * gv * gv;
                    let m_hat = *mv / c1;
                    let v_hat = *vv / c2;
                    *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }

    /// Checkpoint export: `(name, moments)` in deterministic name order.
    pub fn slots(&self) -> impl Iterator<Item = (&String, &Moments<S>)> {
        self.slots.iter()
    }

    /// Checkpoint import; shape-checked against nothing (the caller
    /// validates names against the model it restores).
    pub fn insert_slot(&mut self, name: String, m: ArrayD<S>, v: ArrayD<S>) -> Result<()> {
        if m.raw_dim() != v.raw_dim() {
            return Err(Error::checkpoint(format!(
                "optimizer moments for {name} disagree in shape"
            )));
        }
        self.slots.insert(name, Moments { m, v });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayViewMutD, IxDyn};

    /// Scalar quadratic bowls: loss = sum (p - target)^2.
    struct Bowls {
        p: ArrayD<f64>,
        g: ArrayD<f64>,
        frozen: ArrayD<f64>,
        frozen_g: ArrayD<f64>,
    }

    impl Params<f64> for Bowls {
        fn visit_params(&mut self, f: &mut crate::nn::ParamVisitor<'_, f64>) {
            f(
                "bowl",
                ArrayViewMutD::from(&mut self.p),
                ArrayViewMutD::from(&mut self.g),
            );
            f(
                "frozen",
                ArrayViewMutD::from(&mut self.frozen),
                ArrayViewMutD::from(&mut self.frozen_g),
            );
        }
    }

    fn bowls() -> Bowls {
        Bowls {
            p: ArrayD::zeros(IxDyn(&[2])),
            g: ArrayD::zeros(IxDyn(&[2])),
            frozen: ArrayD::from_elem(IxDyn(&[3]), 0.7),
            frozen_g: ArrayD::zeros(IxDyn(&[3])),
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut model = bowls();
        let mut opt = Adam::new(0.05, 0.9, 0.999);
        let target = [3.0, -1.5];
        for _ in 0..2000 {
            for i in 0..2 {
                model.g[i] = 2.0 * (model.p[i] - target[i]);
            }
            opt.step(&mut model);
        }
        for i in 0..2 {
            assert!(
                (model.p[i] - target[i]).abs() < 1e-3,
                "p[{i}] = {}",
                model.p[i]
            );
        }
    }

    #[test]
    fn zero_gradient_means_exactly_zero_update() {
        let mut model = bowls();
        let mut opt = Adam::new(0.01, 0.9, 0.999);
        let before = model.frozen.clone();
        for _ in 0..50 {
            model.g[0] = 1.0;
            model.g[1] = -2.0;
            // frozen_g stays zero throughout.
            opt.step(&mut model);
        }
        assert_eq!(model.frozen, before, "zero-gradient tensor moved");
        assert_ne!(model.p[0], 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, step one moves each coordinate by
        // lr * g / (|g| + eps') ~= lr * sign(g).
        let mut model = bowls();
        let mut opt = Adam::new(0.01, 0.9, 0.999);
        model.g[0] = 123.0;
        model.g[1] = -0.5;
        opt.step(&mut model);
        assert!((model.p[0] + 0.01).abs() < 1e-6, "p0 = {}", model.p[0]);
        assert!((model.p[1] - 0.01).abs() < 1e-6, "p1 = {}", model.p[1]);
    }
}
