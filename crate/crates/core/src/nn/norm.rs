use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Layer normalization over the trailing feature axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub dim: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let mut ones = Tensor::zeros(&[dim]);
        ones.data_mut().fill(1.0);
        let gamma = store.add(format!("{name}.weight"), ones);
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { dim, gamma, beta }
    }

    pub fn forward(&self, params: &ParamStore, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let gamma = params.get(self.gamma).data();
        let beta = params.get(self.beta).data();
        let rows = x.len() / self.dim;
        let mut y = Vec::with_capacity(x.len());
        let mut normalized = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in x.chunks(self.dim) {
            let mean = row.iter().sum::<f64>() / self.dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.dim as f64;
            let istd = 1.0 / math::sqrt(var + EPS);
            inv_std.push(istd);
            for (i, v) in row.iter().enumerate() {
                let n = (v - mean) * istd;
                normalized.push(n);
                y.push(n * gamma[i] + beta[i]);
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, params: &ParamStore, cache: &LayerNormCache, dy: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let gamma = params.get(self.gamma).data();
        let d = self.dim as f64;
        {
            let dg = grads.get_mut(self.gamma);
            for (row_dy, row_n) in dy.chunks(self.dim).zip(cache.normalized.chunks(self.dim)) {
                for i in 0..self.dim {
                    dg[i] += row_dy[i] * row_n[i];
                }
            }
        }
        {
            let db = grads.get_mut(self.beta);
            for row_dy in dy.chunks(self.dim) {
                for i in 0..self.dim {
                    db[i] += row_dy[i];
                }
            }
        }
        let mut dx = Vec::with_capacity(dy.len());
        for ((row_dy, row_n), &istd) in dy
            .chunks(self.dim)
            .zip(cache.normalized.chunks(self.dim))
            .zip(&cache.inv_std)
        {
            let mut mean_g = 0.0;
            let mut mean_gn = 0.0;
            for i in 0..self.dim {
                let g = row_dy[i] * gamma[i];
                mean_g += g;
                mean_gn += g * row_n[i];
            }
            mean_g /= d;
            mean_gn /= d;
            for i in 0..self.dim {
                let g = row_dy[i] * gamma[i];
                dx.push(istd * (g - mean_g - row_n[i] * mean_gn));
            }
        }
        dx
    }
}
