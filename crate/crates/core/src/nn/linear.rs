use alloc::format;

use rand::Rng;

use crate::linalg::gemm;
use crate::params::{trunc_normal_tensor, Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map applied to each row of an `[N, in]` matrix.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Truncated-normal weights with standard deviation `std`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal_tensor(rng, &[out_features, in_features], std),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &ParamStore, x: &[f64], rows: usize) -> alloc::vec::Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.in_features);
        let bias = params.get(self.bias).data();
        let mut y = alloc::vec::Vec::with_capacity(rows * self.out_features);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        gemm(
            rows,
            self.in_features,
            self.out_features,
            x,
            false,
            params.get(self.weight).data(),
            true,
            1.0,
            &mut y,
        );
        y
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        x: &[f64],
        dy: &[f64],
        rows: usize,
        grads: &mut Gradients,
    ) -> alloc::vec::Vec<f64> {
        gemm(
            self.out_features,
            rows,
            self.in_features,
            dy,
            true,
            x,
            false,
            1.0,
            grads.get_mut(self.weight),
        );
        let db = grads.get_mut(self.bias);
        for row in dy.chunks(self.out_features) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = alloc::vec![0.0; rows * self.in_features];
        gemm(
            rows,
            self.out_features,
            self.in_features,
            dy,
            false,
            params.get(self.weight).data(),
            false,
            0.0,
            &mut dx,
        );
        dx
    }
}
