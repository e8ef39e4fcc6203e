//! Adam with bias correction over a `ParamSet`.

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet};
use crate::error::{Error, Result};

/// First/second moments per parameter plus the shared step counter.
/// Moment vectors are stored in `ParamSet` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            step: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// One bias-corrected update. Advances the step counter by exactly 1.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        // lr == 0 is legal: warmup schedules start there.
        if lr < 0.0 {
            return Err(Error::Contract(format!("learning rate must be >= 0, got {lr}")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, (name, p)) in params.iter_mut().enumerate() {
            let g = grads.get(name).ok_or_else(|| {
                Error::Contract(format!("missing gradient for parameter `{name}`"))
            })?;
            if g.len() != p.data.len() {
                return Err(Error::Contract(format!(
                    "gradient length {} does not match parameter `{name}` length {}",
                    g.len(),
                    p.data.len()
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PTensor;

    fn one_param(data: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        let n = data.len();
        p.insert("w", PTensor { shape: vec![n], data });
        p
    }

    fn grads_for(params: &ParamSet, g: Vec<f64>) -> Gradients {
        let mut gr = Gradients::zeros_like(params);
        *gr.map.get_mut("w").unwrap() = g;
        gr
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction, step 1 update is lr * g / (|g| + eps') ≈ lr * sign(g).
        let mut params = one_param(vec![0.0, 0.0]);
        let mut state = AdamState::new(&params);
        let grads = grads_for(&params, vec![3.0, -0.5]);
        state.step(&mut params, &grads, 0.1).unwrap();
        let w = &params.get("w").unwrap().data;
        assert!((w[0] - (-0.1)).abs() < 1e-4, "w0={}", w[0]);
        assert!((w[1] - 0.1).abs() < 1e-4, "w1={}", w[1]);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![1.0, -2.0]);
        let mut state = AdamState::new(&params);
        let grads = Gradients::zeros_like(&params);
        state.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data, vec![1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn quadratic_descent_decreases_w() {
        // f(w) = w^2, grad = 2w, from w=1 with lr=0.1: strictly decreasing.
        let mut params = one_param(vec![1.0]);
        let mut state = AdamState::new(&params);
        let mut prev = 1.0;
        for _ in 0..2 {
            let w = params.get("w").unwrap().data[0];
            let grads = grads_for(&params, vec![2.0 * w]);
            state.step(&mut params, &grads, 0.1).unwrap();
            let now = params.get("w").unwrap().data[0];
            assert!(now < prev, "w went {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn step_counter_increases_by_one() {
        let mut params = one_param(vec![1.0]);
        let mut state = AdamState::new(&params);
        let grads = Gradients::zeros_like(&params);
        for expect in 1..=5 {
            state.step(&mut params, &grads, 0.01).unwrap();
            assert_eq!(state.step, expect);
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_violation() {
        let mut params = one_param(vec![1.0, 2.0]);
        let mut state = AdamState::new(&params);
        let mut bad = Gradients::zeros_like(&params);
        *bad.map.get_mut("w").unwrap() = vec![1.0];
        assert!(state.step(&mut params, &bad, 0.1).is_err());
    }
}
