//! Learning-rate schedule and the AdamW update.

use crate::params::{Gradients, LrGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Cosine annealing times a per-layer factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub horizon: usize,
    pub pretrained_layers: usize,
}

impl LrSchedule {
    /// 0.1 at the first pretrained layer rising linearly to 1.0 at the last;
    /// 1.0 for new layers and everything outside the stack.
    pub fn layer_factor(&self, group: LrGroup) -> f64 {
        match group {
            LrGroup::Layer(i) if i < self.pretrained_layers => {
                if self.pretrained_layers == 1 {
                    0.1
                } else {
                    0.1 + 0.9 * i as f64 / (self.pretrained_layers - 1) as f64
                }
            }
            _ => 1.0,
        }
    }

    pub fn cosine(&self, iteration: usize) -> f64 {
        if self.horizon == 0 {
            return 1.0;
        }
        let t = iteration.min(self.horizon) as f64 / self.horizon as f64;
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn lr_at(&self, iteration: usize, group: LrGroup) -> f64 {
        self.base * self.cosine(iteration) * self.layer_factor(group)
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: usize,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Matrix::zeros(p.value.rows, p.value.cols)).collect::<Vec<_>>();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros(), v: zeros() }
    }

    /// One update. Parameters without a gradient still receive weight decay
    /// when flagged, so decay is visible under zero-gradient input.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: impl Fn(LrGroup) -> f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let rate = lr(p.group);
            if rate == 0.0 {
                continue;
            }
            let decay = if p.decay { self.weight_decay * rate } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let g = grads.grads[k].as_ref();
            for i in 0..p.value.data.len() {
                let gi = g.map_or(0.0, |g| g.data[i].to_f64().unwrap_or(0.0));
                let mi = b1 * m.data[i].to_f64().unwrap_or(0.0) + (1.0 - b1) * gi;
                let vi = b2 * v.data[i].to_f64().unwrap_or(0.0) + (1.0 - b2) * gi * gi;
                m.data[i] = T::of(mi);
                v.data[i] = T::of(vi);
                let w = p.value.data[i].to_f64().unwrap_or(0.0);
                let upd = rate * (mi / c1) / ((vi / c2).sqrt() + self.eps) + decay * w;
                p.value.data[i] = T::of(w - upd);
            }
        }
    }
}
