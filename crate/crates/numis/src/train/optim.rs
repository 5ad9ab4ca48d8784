//! Stochastic gradient descent with classical momentum.

use std::collections::HashMap;

use crate::tensor::Tensor;

use super::TrainError;

/// SGD with velocity accumulation: `v ← μ·v + g`, `w ← w − η·v`.
///
/// Velocity buffers are created lazily per unfrozen parameter; frozen
/// parameters are skipped entirely and never get a buffer.
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    velocity: HashMap<usize, Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32) -> SgdMomentum {
        SgdMomentum { lr, momentum, velocity: HashMap::new() }
    }

    /// Number of live velocity buffers (one per unfrozen parameter seen).
    pub fn buffer_count(&self) -> usize {
        self.velocity.len()
    }

    /// One update over all unfrozen parameters. Gradients are left in place;
    /// callers zero them after the step.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<(), TrainError> {
        for (name, p) in params {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().ok_or_else(|| TrainError::MissingGrad(name.clone()))?;
            let v = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let mut w = p.to_vec();
            for i in 0..w.len() {
                v[i] = self.momentum * v[i] + g[i];
                w[i] -= self.lr * v[i];
            }
            p.set_data(w);
        }
        Ok(())
    }
}

/// Clears gradients on every parameter.
pub fn zero_grads(params: &[(String, Tensor)]) {
    for (_, p) in params {
        p.zero_grad();
    }
}
