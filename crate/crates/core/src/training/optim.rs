use std::f64::consts::PI;

use crate::numerics::Matrix;
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Linear warm-up from zero to `peak` over the first `warmup_fraction` of
/// `total` iterations, then cosine decay to zero.
pub fn learning_rate(peak: f64, warmup_fraction: f64, iteration: usize, total: usize) -> f64 {
    let warmup = (warmup_fraction * total as f64).round() as usize;
    if iteration < warmup {
        return peak * iteration as f64 / warmup as f64;
    }
    let decay = total.saturating_sub(warmup).max(1);
    let progress = ((iteration - warmup) as f64 / decay as f64).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64, weight_decay: f64) {
        self.steps += 1;
        let c1 = 1.0 - BETA1.powi(self.steps);
        let c2 = 1.0 - BETA2.powi(self.steps);
        for (((p, g), m), v) in store
            .values_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + EPSILON);
                *x -= lr * (update + weight_decay * *x);
            }
        }
    }
}
