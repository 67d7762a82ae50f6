//! Adam with bias correction and exponential learning-rate decay.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::ParamTensor;
use crate::math::{pow, sqrt};

/// First and second moments per parameter tensor.
///
/// Each tensor keeps its own step counter so a tensor whose moments were
/// reset (after its shape changed) restarts bias correction from step 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl AdamState {
    /// Fresh state for tensors of the given lengths, with the usual
    /// `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`.
    pub fn new(lengths: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; lengths.len()],
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.first.len()
    }

    /// Steps taken by tensor `i` since creation or its last reset.
    pub fn steps(&self, i: usize) -> u64 {
        self.steps[i]
    }

    /// Zeroes the moments of tensor `i` and resizes them to `len`.
    pub fn reset_tensor(&mut self, i: usize, len: usize) {
        self.first[i] = vec![0.0; len];
        self.second[i] = vec![0.0; len];
        self.steps[i] = 0;
    }

    /// One Adam update of every tensor. `lr_for(i)` gives tensor `i`'s
    /// learning rate. Nothing is modified if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut [ParamTensor<'_>],
        grads: &[&[f64]],
        mut lr_for: impl FnMut(usize, &ParamTensor<'_>) -> f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.values.len() != g.len() || g.len() != self.first[i].len() {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "tensor `{}`: {} parameters, {} gradients, {} moments",
                    p.name,
                    p.values.len(),
                    g.len(),
                    self.first[i].len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor: p.name.clone(),
                });
            }
        }
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lr_for(i, p);
            self.steps[i] += 1;
            let t = self.steps[i] as f64;
            let c1 = 1.0 - pow(b1, t);
            let c2 = 1.0 - pow(b2, t);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((theta, &g), mi), vi) in p.values.iter_mut().zip(grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                if lr != 0.0 {
                    *theta -= lr * (*mi / c1) / (sqrt(*vi / c2) + eps);
                }
            }
        }
        Ok(())
    }
}

/// `lr0 * target_fraction^(iter / total_iters)`.
pub fn lr_at(iter: usize, lr0: f64, total_iters: usize, target_fraction: f64) -> f64 {
    if total_iters == 0 {
        return lr0;
    }
    lr0 * pow(target_fraction, iter as f64 / total_iters as f64)
}
