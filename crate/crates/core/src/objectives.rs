//! Training objectives: spectrum MSE, background entropy and their sum.

use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::math::log;

/// Default weight of the background entropy term.
pub const DEFAULT_BG_WEIGHT: f64 = 1e-4;

/// Transmittances are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const ENTROPY_EPS: f64 = 1e-6;

/// Losses of one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub spectrum_loss: f64,
    pub bg_loss: f64,
    pub total: f64,
    pub ray_count: usize,
}

impl LossReport {
    pub fn new(spectrum_loss: f64, bg_loss: f64, bg_weight: f64, ray_count: usize) -> Self {
        Self {
            spectrum_loss,
            bg_loss,
            total: total_loss(spectrum_loss, bg_loss, bg_weight),
            ray_count,
        }
    }
}

/// Mean squared error over the batch and its gradient `2 (pred - target) / B`.
pub fn spectrum_mse(predicted: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predicted.is_empty() || predicted.len() != target.len() {
        return Err(contract!(
            "spectrum loss needs equal non-empty batches, got {} and {}",
            predicted.len(),
            target.len()
        ));
    }
    let b = predicted.len() as f64;
    let mut loss = 0.0;
    let grad = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r / b
        })
        .collect();
    Ok((loss / b, grad))
}

/// Binary entropy of one final transmittance and its derivative.
///
/// Rays outside `[EPS, 1 - EPS]` are clamped and get a zero gradient.
#[inline]
pub fn entropy_term(t: f64) -> (f64, f64) {
    let c = t.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
    let loss = -(c * log(c) + (1.0 - c) * log(1.0 - c));
    let grad = if !(ENTROPY_EPS..=1.0 - ENTROPY_EPS).contains(&t) {
        0.0
    } else {
        -log(c / (1.0 - c))
    };
    (loss, grad)
}

/// Background entropy summed over the batch, with per-ray gradients.
pub fn background_entropy(final_transmittance: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = final_transmittance
        .iter()
        .map(|&t| {
            let (l, g) = entropy_term(t);
            loss += l;
            g
        })
        .collect();
    (loss, grad)
}

#[inline]
pub fn total_loss(spectrum_loss: f64, bg_loss: f64, bg_weight: f64) -> f64 {
    spectrum_loss + bg_weight * bg_loss
}
