//! Branch fusion: a parameter-free, elementwise sigmoid-weighted merge of the
//! two attended branch features.
//!
//! `w_k = s_k / (s_1 + s_2 + eps)` with `s_k = sigmoid(phi_k)`, and the fused
//! map is `w_1 * phi_1 + w_2 * phi_2`.

use alloc::vec::Vec;

use crate::error::Result;
use crate::math;
use crate::tensor::FeatureMap;

pub const EPSILON: f64 = 1e-8;

/// Sigmoid arguments are clamped to this magnitude, bounding every `s_k`
/// below by `sigmoid(-50)`.
pub const SIGMOID_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchWeights {
    pub w1: FeatureMap,
    pub w2: FeatureMap,
    pub epsilon: f64,
}

#[inline]
fn clamped_sigmoid(x: f64) -> f64 {
    math::sigmoid(x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP))
}

#[inline]
fn clamped_sigmoid_grad(x: f64, s: f64) -> f64 {
    if x.abs() > SIGMOID_CLAMP {
        0.0
    } else {
        s * (1.0 - s)
    }
}

pub fn branch_weights(phi_1: &FeatureMap, phi_2: &FeatureMap) -> Result<BranchWeights> {
    phi_1.ensure_same_dims(phi_2)?;
    let mut w1 = FeatureMap::zeros(phi_1.dims());
    let mut w2 = FeatureMap::zeros(phi_1.dims());
    for (((a, b), o1), o2) in phi_1
        .data()
        .iter()
        .zip(phi_2.data())
        .zip(w1.data_mut())
        .zip(w2.data_mut())
    {
        let s1 = clamped_sigmoid(*a);
        let s2 = clamped_sigmoid(*b);
        let den = s1 + s2 + EPSILON;
        *o1 = s1 / den;
        *o2 = s2 / den;
    }
    Ok(BranchWeights {
        w1,
        w2,
        epsilon: EPSILON,
    })
}

#[inline]
fn fuse_one(a: f64, b: f64) -> f64 {
    let s1 = clamped_sigmoid(a);
    let s2 = clamped_sigmoid(b);
    // written symmetrically so that swapping the branches is bitwise neutral
    (s1 * a + s2 * b) / (s1 + s2 + EPSILON)
}

pub fn fuse_branches(phi_1: &FeatureMap, phi_2: &FeatureMap) -> Result<FeatureMap> {
    phi_1.ensure_same_dims(phi_2)?;
    let data: Vec<f64> = phi_1
        .data()
        .iter()
        .zip(phi_2.data())
        .map(|(&a, &b)| fuse_one(a, b))
        .collect();
    FeatureMap::from_vec(phi_1.dims(), data)
}

/// Gradients of [`fuse_branches`] w.r.t. both inputs.
pub fn fuse_branches_backward(phi_1: &FeatureMap, phi_2: &FeatureMap, grad_out: &FeatureMap) -> (FeatureMap, FeatureMap) {
    let mut d1 = FeatureMap::zeros(phi_1.dims());
    let mut d2 = FeatureMap::zeros(phi_1.dims());
    for (i, (&a, &b)) in phi_1.data().iter().zip(phi_2.data()).enumerate() {
        let s1 = clamped_sigmoid(a);
        let s2 = clamped_sigmoid(b);
        let den = s1 + s2 + EPSILON;
        let fused = (s1 * a + s2 * b) / den;
        let g = grad_out.data()[i];
        d1.data_mut()[i] = g * (s1 + clamped_sigmoid_grad(a, s1) * (a - fused)) / den;
        d2.data_mut()[i] = g * (s2 + clamped_sigmoid_grad(b, s2) * (b - fused)) / den;
    }
    (d1, d2)
}

/// Plain average used when the fusion module is ablated.
pub fn average_branches(phi_1: &FeatureMap, phi_2: &FeatureMap) -> Result<FeatureMap> {
    phi_1.ensure_same_dims(phi_2)?;
    let data: Vec<f64> = phi_1
        .data()
        .iter()
        .zip(phi_2.data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    FeatureMap::from_vec(phi_1.dims(), data)
}
