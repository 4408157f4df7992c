use alloc::format;
use alloc::vec;

use rand::Rng;

use crate::linalg::gemm;
use crate::math;
use crate::params::{normal_tensor, Gradients, ParamId, ParamStore};
use crate::tensor::{FeatureMap, Tensor};

/// Stride-1 dilated 2-D convolution with zero padding that preserves the
/// spatial size. Kernel size must be odd.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    /// Kaiming-normal weights for a following leaky rectifier of slope
    /// `gain_slope` (use 1.0 for a linear output), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        gain_slope: f64,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = math::sqrt(2.0 / ((1.0 + gain_slope * gain_slope) * fan_in));
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[out_channels, in_channels, kernel, kernel], std),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight,
            bias,
        }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, col: &mut [f64]) {
        let k = self.kernel;
        let pad = self.padding() as isize;
        let d = self.dilation as isize;
        let hw = h * w;
        for ci in 0..self.in_channels {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let oy = ky as isize * d - pad;
                for kx in 0..k {
                    let ox = kx as isize * d - pad;
                    let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + oy;
                        let dst = &mut row[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        for (x, v) in dst.iter_mut().enumerate() {
                            let sx = x as isize + ox;
                            *v = if sx >= 0 && sx < w as isize {
                                src[sx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let pad = self.padding() as isize;
        let d = self.dilation as isize;
        let hw = h * w;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let oy = ky as isize * d - pad;
                for kx in 0..k {
                    let ox = kx as isize * d - pad;
                    let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[y * w..(y + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        for (x, v) in src.iter().enumerate() {
                            let sx = x as isize + ox;
                            if sx >= 0 && sx < w as isize {
                                dst[sx as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &ParamStore, x: &FeatureMap) -> FeatureMap {
        let dims = x.dims();
        assert_eq!(dims.channels, self.in_channels, "conv input channels");
        let (h, w) = (dims.height, dims.width);
        let hw = h * w;
        let weight = params.get(self.weight).data();
        let bias = params.get(self.bias).data();
        let mut out = FeatureMap::zeros(dims.with_channels(self.out_channels));
        let mut col = vec![0.0; self.patch_len() * hw];
        for b in 0..dims.batch {
            self.im2col(x.sample(b), h, w, &mut col);
            let y = out.sample_mut(b);
            for (co, chunk) in y.chunks_mut(hw).enumerate() {
                chunk.fill(bias[co]);
            }
            gemm(self.out_channels, self.patch_len(), hw, weight, false, &col, false, 1.0, y);
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, params: &ParamStore, x: &FeatureMap, dy: &FeatureMap, grads: &mut Gradients) -> FeatureMap {
        let dims = x.dims();
        let (h, w) = (dims.height, dims.width);
        let hw = h * w;
        let weight = params.get(self.weight).data();
        let mut dx = FeatureMap::zeros(dims);
        let mut col = vec![0.0; self.patch_len() * hw];
        let mut dcol = vec![0.0; self.patch_len() * hw];
        for b in 0..dims.batch {
            let g = dy.sample(b);
            self.im2col(x.sample(b), h, w, &mut col);
            gemm(self.out_channels, hw, self.patch_len(), g, false, &col, true, 1.0, grads.get_mut(self.weight));
            let db = grads.get_mut(self.bias);
            for (co, chunk) in g.chunks(hw).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
            gemm(self.patch_len(), self.out_channels, hw, weight, true, g, false, 0.0, &mut dcol);
            self.col2im(&dcol, h, w, dx.sample_mut(b));
        }
        dx
    }
}
