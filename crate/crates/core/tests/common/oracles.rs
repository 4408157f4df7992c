//! Literal reference implementations, written for clarity rather than speed
//! and sharing no code with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashMap;

use crossfuse_core::metrics::Plane;
use crossfuse_core::FeatureMap;

/// Channel attention by direct summation:
/// `y_i = sum_j h(V_i, P_j) P_j / sum_j h(V_i, P_j)`, `out = P + alpha y`.
pub fn nca_double_loop(p: &FeatureMap, v: &FeatureMap, alpha: f64) -> FeatureMap {
    let d = p.dims();
    let n = (d.height * d.width) as f64;
    let mut out = p.clone();
    for b in 0..d.batch {
        for i in 0..d.channels {
            let mut h = vec![0.0; d.channels];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut dot = 0.0;
                for y in 0..d.height {
                    for x in 0..d.width {
                        dot += v.at(b, i, y, x) * p.at(b, j, y, x);
                    }
                }
                *hj = (dot / n).exp();
            }
            let denom: f64 = h.iter().sum();
            for y in 0..d.height {
                for x in 0..d.width {
                    let mut yi = 0.0;
                    for (j, hj) in h.iter().enumerate() {
                        yi += hj * p.at(b, j, y, x);
                    }
                    let idx = out.index(b, i, y, x);
                    out.data_mut()[idx] += alpha * yi / denom;
                }
            }
        }
    }
    out
}

/// SSIM averaged over all fully-contained 11x11 windows, using an explicitly
/// built 2-D Gaussian window (sigma 1.5) and `L = 2`.
pub fn ssim_naive(x: &FeatureMap, y: &FeatureMap) -> f64 {
    const WIN: usize = 11;
    let sigma: f64 = 1.5;
    let c1 = (0.01f64 * 2.0).powi(2);
    let c2 = (0.03f64 * 2.0).powi(2);
    let mut w = [[0.0f64; WIN]; WIN];
    let mut total = 0.0;
    for (dy, row) in w.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (a, b) = (dy as f64 - 5.0, dx as f64 - 5.0);
            *v = (-(a * a + b * b) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let d = x.dims();
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in 0..d.batch {
        for c in 0..d.channels {
            for oy in 0..=d.height - WIN {
                for ox in 0..=d.width - WIN {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..WIN {
                        for dx in 0..WIN {
                            let wt = w[dy][dx] / total;
                            let (a, e) = (x.at(b, c, oy + dy, ox + dx), y.at(b, c, oy + dy, ox + dx));
                            mx += wt * a;
                            my += wt * e;
                            sxx += wt * a * a;
                            syy += wt * e * e;
                            sxy += wt * a * e;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

fn pixel(p: &Plane, x: isize, y: isize) -> f64 {
    let cx = x.clamp(0, p.width as isize - 1) as usize;
    let cy = y.clamp(0, p.height as isize - 1) as usize;
    p.data[cy * p.width + cx]
}

/// Sobel magnitude by explicit 3x3 kernels, replicate borders.
pub fn sobel_oracle(p: &Plane) -> Plane {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut data = Vec::with_capacity(p.data.len());
    for y in 0..p.height as isize {
        for x in 0..p.width as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for ky in 0..3 {
                for kx in 0..3 {
                    let v = pixel(p, x + kx as isize - 1, y + ky as isize - 1);
                    gx += KX[ky][kx] * v;
                    gy += KY[ky][kx] * v;
                }
            }
            data.push((gx * gx + gy * gy).sqrt());
        }
    }
    Plane {
        width: p.width,
        height: p.height,
        data,
    }
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

/// Mutual information in nats from sparse joint counts.
pub fn mi_oracle(x: &Plane, y: &Plane, bins: usize) -> f64 {
    let range = |p: &Plane| {
        let lo = p.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let ((xl, xh), (yl, yh)) = (range(x), range(y));
    if xh <= xl || yh <= yl {
        return 0.0;
    }
    let n = x.data.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut px: HashMap<usize, f64> = HashMap::new();
    let mut py: HashMap<usize, f64> = HashMap::new();
    for (&a, &b) in x.data.iter().zip(&y.data) {
        let (i, j) = (bin_of(a, xl, xh, bins), bin_of(b, yl, yh, bins));
        *joint.entry((i, j)).or_default() += 1.0 / n;
        *px.entry(i).or_default() += 1.0 / n;
        *py.entry(j).or_default() += 1.0 / n;
    }
    let mut keys: Vec<_> = joint.keys().cloned().collect();
    keys.sort_unstable();
    keys.iter().map(|k| {
        let p = joint[k];
        p * (p / (px[&k.0] * py[&k.1])).ln()
    }).sum()
}

pub fn fmi_oracle(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    let sf = sobel_oracle(f);
    mi_oracle(&sf, &sobel_oracle(a), 256) + mi_oracle(&sf, &sobel_oracle(b), 256)
}

/// Direct 2-D Gaussian convolution (radius `ceil(3 sigma)`), replicate borders.
fn blur_2d(p: &Plane, sigma: f64) -> Plane {
    let r = (3.0 * sigma).ceil() as isize;
    let mut weights = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            weights.push((dx, dy, w));
            total += w;
        }
    }
    let mut data = Vec::with_capacity(p.data.len());
    for y in 0..p.height as isize {
        for x in 0..p.width as isize {
            data.push(weights.iter().map(|&(dx, dy, w)| w / total * pixel(p, x + dx, y + dy)).sum());
        }
    }
    Plane {
        width: p.width,
        height: p.height,
        data,
    }
}

/// Chen-Varshney measure evaluated region by region: 16x16 regions,
/// saliency = sum of source Sobel magnitude, distortion = mean squared
/// DoG(sigma 1, 2) response of `source - fused`.
pub fn qcv_region_loop(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    const R: usize = 16;
    let mut num = 0.0;
    let mut den = 0.0;
    for src in [a, b] {
        let diff = Plane {
            width: src.width,
            height: src.height,
            data: src.data.iter().zip(&f.data).map(|(s, v)| s - v).collect(),
        };
        let (c, s) = (blur_2d(&diff, 1.0), blur_2d(&diff, 2.0));
        let edges = sobel_oracle(src);
        for ry in (0..src.height).step_by(R) {
            for rx in (0..src.width).step_by(R) {
                let (mut sal, mut energy, mut n) = (0.0, 0.0, 0.0);
                for y in ry..(ry + R).min(src.height) {
                    for x in rx..(rx + R).min(src.width) {
                        let k = y * src.width + x;
                        sal += edges.data[k];
                        let band = c.data[k] - s.data[k];
                        energy += band * band;
                        n += 1.0;
                    }
                }
                num += sal * energy / n;
                den += sal;
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Mask oracle for shifted windows: in the rolled frame, position `v` on an
/// axis of padded length `len` came from `v + shift`; it wrapped around iff
/// that exceeds the axis. Two tokens of one window may attend to each other
/// iff they agree on wrapping along both axes.
pub fn shifted_pair_allowed(window_origin: (usize, usize), i: usize, j: usize, window: usize, shift: usize, padded: (usize, usize)) -> bool {
    let coord = |t: usize| (window_origin.0 + t / window, window_origin.1 + t % window);
    let wraps = |(y, x): (usize, usize)| (y + shift >= padded.0, x + shift >= padded.1);
    wraps(coord(i)) == wraps(coord(j))
}
