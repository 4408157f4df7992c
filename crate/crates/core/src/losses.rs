//! Reconstruction objective: mean squared error plus a weighted SSIM term.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::FeatureMap;

/// Weight of the structural term in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_1: 10.0 }
    }
}

/// Gaussian-window SSIM parameters. The defaults are the usual 11x11 window
/// with sigma 1.5 and a dynamic range of 2 for data in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 2.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        let v = self.k1 * self.dynamic_range;
        v * v
    }

    pub fn c2(&self) -> f64 {
        let v = self.k2 * self.dynamic_range;
        v * v
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let mut k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                math::exp(-d * d / (2.0 * self.sigma * self.sigma))
            })
            .collect();
        let s: f64 = k.iter().sum();
        for v in k.iter_mut() {
            *v /= s;
        }
        k
    }
}

pub fn mse_loss(output: &FeatureMap, input: &FeatureMap) -> Result<f64> {
    output.ensure_same_dims(input)?;
    let n = output.data().len() as f64;
    Ok(output
        .data()
        .iter()
        .zip(input.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn mse_grad(output: &FeatureMap, input: &FeatureMap) -> FeatureMap {
    let n = output.data().len() as f64;
    let data = output
        .data()
        .iter()
        .zip(input.data())
        .map(|(a, b)| 2.0 * (a - b) / n)
        .collect();
    FeatureMap::from_vec(output.dims(), data).expect("same dims")
}

/// Separable "valid" correlation of an `h x w` plane with `k (x) k`.
fn valid_filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`valid_filter`].
fn valid_filter_adjoint(map: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let g = map[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                rows[(y + i) * ow + x] += kv * g;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let g = rows[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * g;
            }
        }
    }
    out
}

fn check_ssim_inputs(x: &FeatureMap, y: &FeatureMap, cfg: &SsimConfig) -> Result<()> {
    x.ensure_same_dims(y)?;
    let d = x.dims();
    if d.height < cfg.window || d.width < cfg.window {
        return Err(Error::TooSmall {
            height: d.height,
            width: d.width,
            min: cfg.window,
        });
    }
    Ok(())
}

/// Mean SSIM over every window position lying fully inside the image,
/// averaged over batch and channels.
pub fn ssim(x: &FeatureMap, y: &FeatureMap) -> Result<f64> {
    ssim_with(x, y, &SsimConfig::default(), false).map(|(v, _)| v)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_grad(x: &FeatureMap, y: &FeatureMap) -> Result<(f64, FeatureMap)> {
    ssim_with(x, y, &SsimConfig::default(), true).map(|(v, g)| (v, g.expect("requested")))
}

pub fn ssim_with(x: &FeatureMap, y: &FeatureMap, cfg: &SsimConfig, want_grad: bool) -> Result<(f64, Option<FeatureMap>)> {
    check_ssim_inputs(x, y, cfg)?;
    let d = x.dims();
    let (h, w) = (d.height, d.width);
    let k = cfg.kernel();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let positions = (h - cfg.window + 1) * (w - cfg.window + 1);
    let total = (positions * d.batch * d.channels) as f64;
    let mut sum = 0.0;
    let mut grad = want_grad.then(|| FeatureMap::zeros(d));
    for b in 0..d.batch {
        for c in 0..d.channels {
            let xp = x.plane(b, c);
            let yp = y.plane(b, c);
            let xx: Vec<f64> = xp.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = yp.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = xp.iter().zip(yp).map(|(a, b)| a * b).collect();
            let mu_x = valid_filter(xp, h, w, &k);
            let mu_y = valid_filter(yp, h, w, &k);
            let e_xx = valid_filter(&xx, h, w, &k);
            let e_yy = valid_filter(&yy, h, w, &k);
            let e_xy = valid_filter(&xy, h, w, &k);
            let mut g_mu = vec![0.0; positions];
            let mut g_xx = vec![0.0; positions];
            let mut g_xy = vec![0.0; positions];
            for i in 0..positions {
                let (mx, my) = (mu_x[i], mu_y[i]);
                let sxx = e_xx[i] - mx * mx;
                let syy = e_yy[i] - my * my;
                let sxy = e_xy[i] - mx * my;
                let a1 = 2.0 * mx * my + c1;
                let a2 = 2.0 * sxy + c2;
                let b1 = mx * mx + my * my + c1;
                let b2 = sxx + syy + c2;
                let s = (a1 * a2) / (b1 * b2);
                sum += s;
                if want_grad {
                    let inv = 1.0 / total;
                    g_mu[i] = inv * s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2);
                    g_xx[i] = -inv * s / b2;
                    g_xy[i] = inv * 2.0 * s / a2;
                }
            }
            if let Some(g) = grad.as_mut() {
                let t_mu = valid_filter_adjoint(&g_mu, h, w, &k);
                let t_xx = valid_filter_adjoint(&g_xx, h, w, &k);
                let t_xy = valid_filter_adjoint(&g_xy, h, w, &k);
                let start = g.index(b, c, 0, 0);
                let out = &mut g.data_mut()[start..start + h * w];
                for p in 0..h * w {
                    out[p] = t_mu[p] + 2.0 * xp[p] * t_xx[p] + yp[p] * t_xy[p];
                }
            }
        }
    }
    Ok((sum / total, grad))
}

/// `mse + lambda_1 * (1 - ssim)`.
pub fn total_loss(output: &FeatureMap, input: &FeatureMap, weights: LossWeights) -> Result<f64> {
    let mse = mse_loss(output, input)?;
    if weights.lambda_1 == 0.0 {
        return Ok(mse);
    }
    Ok(mse + weights.lambda_1 * (1.0 - ssim(output, input)?))
}

/// Total loss and its gradient with respect to `output`.
pub fn total_loss_grad(output: &FeatureMap, input: &FeatureMap, weights: LossWeights) -> Result<(f64, FeatureMap)> {
    let mse = mse_loss(output, input)?;
    let mut grad = mse_grad(output, input);
    if weights.lambda_1 == 0.0 {
        return Ok((mse, grad));
    }
    let (s, gs) = ssim_grad(output, input)?;
    for (g, v) in grad.data_mut().iter_mut().zip(gs.data()) {
        *g -= weights.lambda_1 * v;
    }
    Ok((mse + weights.lambda_1 * (1.0 - s), grad))
}
