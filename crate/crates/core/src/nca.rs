//! Non-local cross-modal channel attention.
//!
//! For a primary feature `P` and a vice feature `V` (both `[B, C, H, W]`),
//! channel `i` of the attended map is a convex combination of the channels of
//! `P`, weighted by `h(V_i, P_j) = exp(<V_i, P_j> / (H W))` where channels are
//! flattened over their spatial support. The block returns `P + alpha * Y`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::linalg::gemm;
use crate::math;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{FeatureMap, Tensor};

/// Row-stabilized channel affinities `[B, C, C]`.
///
/// Entry `(i, j)` is `h(V_i, P_j)` divided by the row maximum, so entries are
/// strictly positive and normalizing a row yields the attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffinity {
    pub batch: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ChannelAffinity {
    pub fn row(&self, b: usize, i: usize) -> &[f64] {
        let c = self.channels;
        &self.data[(b * c + i) * c..(b * c + i + 1) * c]
    }

    /// Row-normalized weights (a softmax over the vice-to-primary logits).
    pub fn normalized(&self) -> Vec<f64> {
        let mut w = self.data.clone();
        for row in w.chunks_mut(self.channels) {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        w
    }
}

/// Computes [`ChannelAffinity`] between `phi_v` (rows) and `phi_p` (columns).
pub fn channel_affinity(phi_v: &FeatureMap, phi_p: &FeatureMap) -> Result<ChannelAffinity> {
    phi_v.ensure_same_dims(phi_p)?;
    let d = phi_v.dims();
    let (c, n) = (d.channels, d.plane());
    let mut data = vec![0.0; d.batch * c * c];
    for b in 0..d.batch {
        let out = &mut data[b * c * c..(b + 1) * c * c];
        gemm(c, n, c, phi_v.sample(b), false, phi_p.sample(b), true, 0.0, out);
        let scale = 1.0 / n as f64;
        for row in out.chunks_mut(c) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) * scale;
            for v in row.iter_mut() {
                *v = math::exp(*v * scale - max);
            }
        }
    }
    Ok(ChannelAffinity {
        batch: d.batch,
        channels: c,
        data,
    })
}

/// Learnable residual scale of one attention block.
#[derive(Debug, Clone)]
pub struct NcaBlock {
    pub alpha: ParamId,
}

#[derive(Debug, Clone)]
pub struct NcaTrace {
    weights: Vec<f64>,
    attended: FeatureMap,
}

impl NcaTrace {
    /// The attended map `Y` before the residual.
    pub fn attended(&self) -> &FeatureMap {
        &self.attended
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl NcaBlock {
    /// Registers `alpha` initialized to zero, so a fresh block is the identity.
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        let alpha = store.add(format!("{name}.alpha"), Tensor::zeros(&[1]));
        Self { alpha }
    }

    /// A block reusing an existing `alpha`.
    pub fn sharing(alpha: ParamId) -> Self {
        Self { alpha }
    }

    pub fn alpha(&self, params: &ParamStore) -> f64 {
        params.get(self.alpha).data()[0]
    }

    pub fn forward(&self, params: &ParamStore, phi_p: &FeatureMap, phi_v: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_traced(params, phi_p, phi_v)?.0)
    }

    pub fn forward_traced(&self, params: &ParamStore, phi_p: &FeatureMap, phi_v: &FeatureMap) -> Result<(FeatureMap, NcaTrace)> {
        let alpha = self.alpha(params);
        if !alpha.is_finite() {
            return Err(crate::Error::NonFinite(params.name(self.alpha).into()));
        }
        let weights = channel_affinity(phi_v, phi_p)?.normalized();
        let d = phi_p.dims();
        let (c, n) = (d.channels, d.plane());
        let mut attended = FeatureMap::zeros(d);
        for b in 0..d.batch {
            gemm(c, c, n, &weights[b * c * c..(b + 1) * c * c], false, phi_p.sample(b), false, 0.0, attended.sample_mut(b));
        }
        let mut out = phi_p.clone();
        for (o, y) in out.data_mut().iter_mut().zip(attended.data()) {
            *o += alpha * y;
        }
        Ok((out, NcaTrace { weights, attended }))
    }

    /// Accumulates the `alpha` gradient; returns `(d phi_p, d phi_v)`.
    pub fn backward(
        &self,
        params: &ParamStore,
        phi_p: &FeatureMap,
        phi_v: &FeatureMap,
        trace: &NcaTrace,
        grad_out: &FeatureMap,
        grads: &mut Gradients,
    ) -> (FeatureMap, FeatureMap) {
        let alpha = self.alpha(params);
        let d = phi_p.dims();
        let (c, n) = (d.channels, d.plane());
        let inv_n = 1.0 / n as f64;

        grads.get_mut(self.alpha)[0] += grad_out
            .data()
            .iter()
            .zip(trace.attended.data())
            .map(|(g, y)| g * y)
            .sum::<f64>();

        let mut d_p = grad_out.clone();
        let mut d_v = FeatureMap::zeros(d);
        let mut d_w = vec![0.0; c * c];
        let mut d_y = vec![0.0; c * n];
        for b in 0..d.batch {
            let w = &trace.weights[b * c * c..(b + 1) * c * c];
            let p = phi_p.sample(b);
            for (dy, g) in d_y.iter_mut().zip(grad_out.sample(b)) {
                *dy = alpha * g;
            }
            gemm(c, n, c, &d_y, false, p, true, 0.0, &mut d_w);
            gemm(c, c, n, w, true, &d_y, false, 1.0, d_p.sample_mut(b));
            // softmax backward, in place: d_w becomes d(logits)
            for (wr, dr) in w.chunks(c).zip(d_w.chunks_mut(c)) {
                let dot: f64 = wr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dv, wv) in dr.iter_mut().zip(wr) {
                    *dv = wv * (*dv - dot) * inv_n;
                }
            }
            gemm(c, c, n, &d_w, false, p, false, 0.0, d_v.sample_mut(b));
            gemm(c, c, n, &d_w, true, phi_v.sample(b), false, 1.0, d_p.sample_mut(b));
        }
        (d_p, d_v)
    }
}

/// Runs both attention directions: each branch is primary once, with the
/// other branch as vice.
pub fn nca_pair(
    params: &ParamStore,
    phi_1: &FeatureMap,
    phi_2: &FeatureMap,
    block_1: &NcaBlock,
    block_2: &NcaBlock,
) -> Result<(FeatureMap, FeatureMap)> {
    Ok((
        block_1.forward(params, phi_1, phi_2)?,
        block_2.forward(params, phi_2, phi_1)?,
    ))
}
