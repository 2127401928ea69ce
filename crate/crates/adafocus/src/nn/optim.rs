//! Optimizers: Nesterov-momentum SGD with cosine learning-rate annealing for
//! the backbones/classifier, Adam for the policies.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::param::{check_finite_grads, Params};
use crate::error::Result;

/// Cosine-annealed learning rate: starts at `lr0`, reaches 0 at `total_steps`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct SgdNesterov {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub step: usize,
    velocity: HashMap<String, ArrayD<f64>>,
}

impl SgdNesterov {
    pub fn new(lr0: f64, total_steps: usize) -> Self {
        SgdNesterov {
            lr0,
            momentum: 0.9,
            weight_decay: 1e-4,
            total_steps,
            step: 0,
            velocity: HashMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.lr0, self.step, self.total_steps)
    }

    pub fn apply<P: Params>(&mut self, params: &mut P) -> Result<()> {
        check_finite_grads(params, &format!("sgd step {}", self.step))?;
        let lr = self.current_lr();
        let momentum = self.momentum;
        let wd = self.weight_decay;
        let velocity = &mut self.velocity;
        params.visit_params("", &mut |name, mut v, g| {
            let vel = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(v.raw_dim()));
            for ((p, gr), vl) in v.iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
                let d = gr + wd * *p;
                *vl = momentum * *vl + d;
                // Nesterov lookahead
                *p -= lr * (d + momentum * *vl);
            }
        });
        self.step += 1;
        Ok(())
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    moments: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn apply<P: Params>(&mut self, params: &mut P) -> Result<()> {
        check_finite_grads(params, &format!("adam step {}", self.step))?;
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let moments = &mut self.moments;
        params.visit_params("", &mut |name, mut v, g| {
            let (m, s) = moments.entry(name.to_string()).or_insert_with(|| {
                (ArrayD::zeros(v.raw_dim()), ArrayD::zeros(v.raw_dim()))
            });
            for ((p, gr), (mi, si)) in v.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(s.iter_mut())) {
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *si = b2 * *si + (1.0 - b2) * gr * gr;
                let mhat = *mi / bc1;
                let shat = *si / bc2;
                *p -= lr * mhat / (shat.sqrt() + eps);
            }
        });
        Ok(())
    }
}
