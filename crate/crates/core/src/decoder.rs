//! Windowed-attention reconstruction head.
//!
//! Fused features are cut into non-overlapping patches and embedded as
//! tokens, passed through a stack of window self-attention blocks (every
//! second block on cyclically shifted windows), projected back to pixels and
//! squeezed to one channel through two convolutions and a final `tanh`.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::math;
use crate::model::NetworkConfig;
use crate::nn::{gelu, gelu_backward, leaky_relu, leaky_relu_backward, tanh_backward, Conv2d, LayerNorm, LayerNormCache, Linear};
use crate::params::{trunc_normal_tensor, Gradients, ParamId, ParamStore};
use crate::tensor::{Dims4, FeatureMap, TokenGrid};

/// Additive logit for token pairs that straddle a cyclic-shift seam.
pub const MASK_VALUE: f64 = -1.0e4;

const TRANSFORMER_INIT_STD: f64 = 0.02;

/// Index into `0..n` reflecting at both borders without repeating the edge.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Spatial bookkeeping of the patch embedding: the original size and the
/// reflect-padded size that is divisible by the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchMeta {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub patch: usize,
}

impl PatchMeta {
    pub fn grid(&self) -> (usize, usize) {
        (self.padded_height / self.patch, self.padded_width / self.patch)
    }
}

/// Linear embedding of `patch x patch` feature patches into `embed_dim` tokens.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub channels: usize,
    pub patch: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, patch: usize, embed_dim: usize, rng: &mut R) -> Self {
        let fan_in = channels * patch * patch;
        let proj = Linear::new(store, name, fan_in, embed_dim, 1.0 / math::sqrt(fan_in as f64), rng);
        Self { channels, patch, proj }
    }

    pub fn meta_for(&self, dims: Dims4) -> PatchMeta {
        let p = self.patch;
        PatchMeta {
            height: dims.height,
            width: dims.width,
            padded_height: dims.height.div_ceil(p) * p,
            padded_width: dims.width.div_ceil(p) * p,
            patch: p,
        }
    }

    /// Rows of flattened `(channel, py, px)` patches, one per token.
    fn gather(&self, phi: &FeatureMap, meta: &PatchMeta) -> Vec<f64> {
        let d = phi.dims();
        let p = self.patch;
        let (gh, gw) = meta.grid();
        let mut rows = Vec::with_capacity(d.batch * gh * gw * d.channels * p * p);
        for b in 0..d.batch {
            for ty in 0..gh {
                for tx in 0..gw {
                    for c in 0..d.channels {
                        for py in 0..p {
                            let y = reflect_index(ty * p + py, d.height);
                            for px in 0..p {
                                let x = reflect_index(tx * p + px, d.width);
                                rows.push(phi.at(b, c, y, x));
                            }
                        }
                    }
                }
            }
        }
        rows
    }

    fn scatter(&self, rows: &[f64], dims: Dims4, meta: &PatchMeta) -> FeatureMap {
        let p = self.patch;
        let (gh, gw) = meta.grid();
        let mut out = FeatureMap::zeros(dims);
        let mut k = 0;
        for b in 0..dims.batch {
            for ty in 0..gh {
                for tx in 0..gw {
                    for c in 0..dims.channels {
                        for py in 0..p {
                            let y = reflect_index(ty * p + py, dims.height);
                            for px in 0..p {
                                let x = reflect_index(tx * p + px, dims.width);
                                let i = out.index(b, c, y, x);
                                out.data_mut()[i] += rows[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &ParamStore, phi: &FeatureMap) -> Result<(TokenGrid, PatchMeta)> {
        let d = phi.dims();
        if d.is_empty() {
            return Err(Error::EmptyTensor(d));
        }
        if d.channels != self.channels {
            return Err(Error::Config(format!(
                "patch embedding expects {} channels, got {}",
                self.channels, d.channels
            )));
        }
        let meta = self.meta_for(d);
        let (gh, gw) = meta.grid();
        let rows = self.gather(phi, &meta);
        let tokens = self.proj.forward(params, &rows, d.batch * gh * gw);
        Ok((TokenGrid::from_vec(d.batch, gh, gw, self.proj.out_features, tokens)?, meta))
    }

    pub fn backward(&self, params: &ParamStore, phi: &FeatureMap, meta: &PatchMeta, grad_tokens: &TokenGrid, grads: &mut Gradients) -> FeatureMap {
        let rows = self.gather(phi, meta);
        let n = grad_tokens.batch * grad_tokens.len();
        let d_rows = self.proj.backward(params, &rows, &grad_tokens.data, n, grads);
        self.scatter(&d_rows, phi.dims(), meta)
    }
}

/// How tokens of a grid are arranged into (optionally shifted) windows.
///
/// The grid is zero-padded at the bottom/right to a multiple of the window,
/// rolled by `-shift` along both axes and cut into `window x window` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub window: usize,
    pub shift: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    /// Source token (row-major grid index) of every `(window, slot)`
    /// position; `None` for padding.
    pub source: Vec<Option<usize>>,
}

impl WindowLayout {
    pub fn new(grid_h: usize, grid_w: usize, window: usize, shift: usize) -> Self {
        assert!(window >= 1 && shift < window.max(1));
        let padded_h = grid_h.div_ceil(window) * window;
        let padded_w = grid_w.div_ceil(window) * window;
        let (nwh, nww) = (padded_h / window, padded_w / window);
        let t = window * window;
        let mut source = vec![None; nwh * nww * t];
        for y in 0..padded_h {
            for x in 0..padded_w {
                let sy = (y + shift) % padded_h;
                let sx = (x + shift) % padded_w;
                let slot = ((y / window) * nww + x / window) * t + (y % window) * window + x % window;
                if sy < grid_h && sx < grid_w {
                    source[slot] = Some(sy * grid_w + sx);
                }
            }
        }
        Self {
            grid_h,
            grid_w,
            window,
            shift,
            padded_h,
            padded_w,
            source,
        }
    }

    pub fn num_windows(&self) -> usize {
        (self.padded_h / self.window) * (self.padded_w / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Additive attention mask `[num_windows, T, T]`, or `None` without shift.
    ///
    /// Positions are labelled by the strip of the shifted frame they fall in
    /// (`[0, P - M)`, `[P - M, P - s)`, `[P - s, P)` per axis); pairs with
    /// different labels get [`MASK_VALUE`].
    pub fn mask(&self) -> Option<Vec<f64>> {
        if self.shift == 0 {
            return None;
        }
        let m = self.window;
        let s = self.shift;
        let strip = |v: usize, p: usize| -> usize {
            if v < p - m {
                0
            } else if v < p - s {
                1
            } else {
                2
            }
        };
        let nww = self.padded_w / m;
        let t = m * m;
        let mut mask = vec![0.0; self.num_windows() * t * t];
        for w in 0..self.num_windows() {
            let (wy, wx) = (w / nww, w % nww);
            let label = |i: usize| {
                let y = wy * m + i / m;
                let x = wx * m + i % m;
                strip(y, self.padded_h) * 3 + strip(x, self.padded_w)
            };
            for i in 0..t {
                let li = label(i);
                for j in 0..t {
                    if label(j) != li {
                        mask[(w * t + i) * t + j] = MASK_VALUE;
                    }
                }
            }
        }
        Some(mask)
    }

    /// Copies tokens `[B, L, D]` into windows `[B * nW, T, D]`.
    fn partition(&self, tokens: &[f64], batch: usize, dim: usize) -> Vec<f64> {
        let l = self.grid_h * self.grid_w;
        let per_batch = self.source.len();
        let mut out = vec![0.0; batch * per_batch * dim];
        for b in 0..batch {
            for (slot, src) in self.source.iter().enumerate() {
                if let Some(s) = src {
                    let from = (b * l + s) * dim;
                    let to = (b * per_batch + slot) * dim;
                    out[to..to + dim].copy_from_slice(&tokens[from..from + dim]);
                }
            }
        }
        out
    }

    /// Inverse of [`Self::partition`]; padding slots are dropped.
    fn reverse(&self, windows: &[f64], batch: usize, dim: usize) -> Vec<f64> {
        let l = self.grid_h * self.grid_w;
        let per_batch = self.source.len();
        let mut out = vec![0.0; batch * l * dim];
        for b in 0..batch {
            for (slot, src) in self.source.iter().enumerate() {
                if let Some(s) = src {
                    let from = (b * per_batch + slot) * dim;
                    let to = (b * l + s) * dim;
                    out[to..to + dim].copy_from_slice(&windows[from..from + dim]);
                }
            }
        }
        out
    }
}

/// Tokens cut into square windows, with the padding needed to undo the cut.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedTokens {
    pub layout: WindowLayout,
    pub batch: usize,
    pub dim: usize,
    /// `[batch * num_windows, window * window, dim]`
    pub data: Vec<f64>,
}

fn effective_window(grid_h: usize, grid_w: usize, window: usize) -> usize {
    let m = window.min(grid_h).min(grid_w);
    if m < window {
        log::warn!("window size {window} exceeds token grid {grid_h}x{grid_w}; clamping to {m}");
    }
    m
}

/// Splits a token grid into unshifted windows of size `window` (clamped to
/// the grid), zero-padding the grid to a multiple of the window.
pub fn window_partition(tokens: &TokenGrid, window: usize) -> WindowedTokens {
    let m = effective_window(tokens.grid_h, tokens.grid_w, window.max(1));
    let layout = WindowLayout::new(tokens.grid_h, tokens.grid_w, m, 0);
    let data = layout.partition(&tokens.data, tokens.batch, tokens.dim);
    WindowedTokens {
        layout,
        batch: tokens.batch,
        dim: tokens.dim,
        data,
    }
}

pub fn window_reverse(windows: &WindowedTokens) -> TokenGrid {
    let l = &windows.layout;
    TokenGrid {
        batch: windows.batch,
        grid_h: l.grid_h,
        grid_w: l.grid_w,
        dim: windows.dim,
        data: l.reverse(&windows.data, windows.batch, windows.dim),
    }
}

/// Analytic multiply-accumulate count of window attention (`Q K^T` and
/// `A V`) over a `grid_h x grid_w` token grid.
pub fn attention_macs(grid_h: usize, grid_w: usize, window: usize, dim: usize) -> u64 {
    let m = window.min(grid_h).min(grid_w);
    let layout_windows = grid_h.div_ceil(m) * grid_w.div_ceil(m);
    let t = (m * m) as u64;
    layout_windows as u64 * 2 * t * t * dim as u64
}

/// One window self-attention transformer block.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
    norm1: LayerNorm,
    qkv: Linear,
    rel_bias: ParamId,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Intermediate values of [`SwinBlock::forward_traced`].
#[derive(Debug, Clone)]
pub struct SwinTrace {
    layout: WindowLayout,
    ln1: LayerNormCache,
    windows: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn_out: Vec<f64>,
    ln2: LayerNormCache,
    h2: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
}

impl SwinTrace {
    pub fn layout(&self) -> &WindowLayout {
        &self.layout
    }

    /// Post-softmax attention `[B * nW, heads, T, T]`.
    pub fn attention(&self) -> &[f64] {
        &self.probs
    }
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("embed_dim {dim} is not divisible by num_heads {heads}")));
        }
        let table = (2 * window - 1) * (2 * window - 1);
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let qkv = Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, TRANSFORMER_INIT_STD, rng);
        let rel_bias = store.add(
            format!("{name}.attn.rel_bias"),
            trunc_normal_tensor(rng, &[table, heads], TRANSFORMER_INIT_STD),
        );
        let proj = Linear::new(store, &format!("{name}.attn.proj"), dim, dim, TRANSFORMER_INIT_STD, rng);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim);
        let fc1 = Linear::new(store, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, TRANSFORMER_INIT_STD, rng);
        let fc2 = Linear::new(store, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, TRANSFORMER_INIT_STD, rng);
        Ok(Self {
            dim,
            heads,
            window,
            shifted,
            norm1,
            qkv,
            rel_bias,
            proj,
            norm2,
            fc1,
            fc2,
        })
    }

    /// Window layout for a grid: the window is clamped to the grid, and a
    /// grid no larger than the window is never shifted.
    pub fn layout_for(&self, grid_h: usize, grid_w: usize) -> WindowLayout {
        let m = effective_window(grid_h, grid_w, self.window);
        let shift = if self.shifted && grid_h.min(grid_w) > self.window {
            m / 2
        } else {
            0
        };
        WindowLayout::new(grid_h, grid_w, m, shift)
    }

    #[inline]
    fn rel_index(&self, m: usize, i: usize, j: usize) -> usize {
        let big = self.window;
        let (yi, xi) = (i / m, i % m);
        let (yj, xj) = (j / m, j % m);
        (yi + big - 1 - yj) * (2 * big - 1) + (xi + big - 1 - xj)
    }

    pub fn forward(&self, params: &ParamStore, tokens: &TokenGrid) -> Result<TokenGrid> {
        Ok(self.forward_traced(params, tokens)?.0)
    }

    pub fn forward_traced(&self, params: &ParamStore, tokens: &TokenGrid) -> Result<(TokenGrid, SwinTrace)> {
        if tokens.dim != self.dim {
            return Err(Error::Config(format!("block expects dim {}, got {}", self.dim, tokens.dim)));
        }
        let layout = self.layout_for(tokens.grid_h, tokens.grid_w);
        let batch = tokens.batch;
        let d = self.dim;
        let hd = d / self.heads;
        let t = layout.tokens_per_window();
        let nw = layout.num_windows();
        let bw = batch * nw;
        let scale = 1.0 / math::sqrt(hd as f64);
        let mask = layout.mask();
        let bias_table = params.get(self.rel_bias).data();

        let (h1, ln1) = self.norm1.forward(params, &tokens.data);
        let windows = layout.partition(&h1, batch, d);
        let qkv = self.qkv.forward(params, &windows, bw * t);

        let mut probs = vec![0.0; bw * self.heads * t * t];
        let mut attn_out = vec![0.0; bw * t * d];
        let mut q = vec![0.0; t * hd];
        let mut k = vec![0.0; t * hd];
        let mut v = vec![0.0; t * hd];
        let mut o = vec![0.0; t * hd];
        let m = layout.window;
        for w in 0..bw {
            let win_mask = mask.as_ref().map(|mk| &mk[(w % nw) * t * t..(w % nw + 1) * t * t]);
            for h in 0..self.heads {
                for i in 0..t {
                    let row = &qkv[(w * t + i) * 3 * d..(w * t + i + 1) * 3 * d];
                    q[i * hd..(i + 1) * hd].copy_from_slice(&row[h * hd..(h + 1) * hd]);
                    k[i * hd..(i + 1) * hd].copy_from_slice(&row[d + h * hd..d + (h + 1) * hd]);
                    v[i * hd..(i + 1) * hd].copy_from_slice(&row[2 * d + h * hd..2 * d + (h + 1) * hd]);
                }
                let p = &mut probs[(w * self.heads + h) * t * t..(w * self.heads + h + 1) * t * t];
                gemm(t, hd, t, &q, false, &k, true, 0.0, p);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    for (j, val) in row.iter_mut().enumerate() {
                        *val = *val * scale + bias_table[self.rel_index(m, i, j) * self.heads + h];
                        if let Some(mk) = win_mask {
                            *val += mk[i * t + j];
                        }
                    }
                    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut sum = 0.0;
                    for val in row.iter_mut() {
                        *val = math::exp(*val - max);
                        sum += *val;
                    }
                    for val in row.iter_mut() {
                        *val /= sum;
                    }
                }
                gemm(t, t, hd, p, false, &v, false, 0.0, &mut o);
                for i in 0..t {
                    attn_out[(w * t + i) * d + h * hd..(w * t + i) * d + (h + 1) * hd].copy_from_slice(&o[i * hd..(i + 1) * hd]);
                }
            }
        }
        let projected = self.proj.forward(params, &attn_out, bw * t);
        let mut x1 = layout.reverse(&projected, batch, d);
        for (a, b) in x1.iter_mut().zip(&tokens.data) {
            *a += b;
        }

        let rows = batch * tokens.len();
        let (h2, ln2) = self.norm2.forward(params, &x1);
        let pre_act = self.fc1.forward(params, &h2, rows);
        let act: Vec<f64> = pre_act.iter().map(|&a| gelu(a)).collect();
        let mlp = self.fc2.forward(params, &act, rows);
        for (a, b) in x1.iter_mut().zip(&mlp) {
            *a += b;
        }
        let out = TokenGrid::from_vec(batch, tokens.grid_h, tokens.grid_w, d, x1)?;
        Ok((
            out,
            SwinTrace {
                layout,
                ln1,
                windows,
                qkv,
                probs,
                attn_out,
                ln2,
                h2,
                pre_act,
                act,
            },
        ))
    }

    pub fn backward(&self, params: &ParamStore, trace: &SwinTrace, grad_out: &TokenGrid, grads: &mut Gradients) -> TokenGrid {
        let batch = grad_out.batch;
        let d = self.dim;
        let hd = d / self.heads;
        let layout = &trace.layout;
        let t = layout.tokens_per_window();
        let m = layout.window;
        let bw = batch * layout.num_windows();
        let rows = batch * grad_out.len();
        let scale = 1.0 / math::sqrt(hd as f64);

        // MLP branch
        let d_act = self.fc2.backward(params, &trace.act, &grad_out.data, rows, grads);
        let d_pre: Vec<f64> = d_act.iter().zip(&trace.pre_act).map(|(g, &a)| g * gelu_backward(a)).collect();
        let d_h2 = self.fc1.backward(params, &trace.h2, &d_pre, rows, grads);
        let mut d_x1 = self.norm2.backward(params, &trace.ln2, &d_h2, grads);
        for (a, b) in d_x1.iter_mut().zip(&grad_out.data) {
            *a += b;
        }

        // attention branch
        let d_projected = layout.partition(&d_x1, batch, d);
        let d_attn = self.proj.backward(params, &trace.attn_out, &d_projected, bw * t, grads);
        let mut d_qkv = vec![0.0; bw * t * 3 * d];
        let mut q = vec![0.0; t * hd];
        let mut k = vec![0.0; t * hd];
        let mut v = vec![0.0; t * hd];
        let mut d_o = vec![0.0; t * hd];
        let mut d_p = vec![0.0; t * t];
        let mut d_q = vec![0.0; t * hd];
        let mut d_k = vec![0.0; t * hd];
        let mut d_v = vec![0.0; t * hd];
        for w in 0..bw {
            for h in 0..self.heads {
                for i in 0..t {
                    let row = &trace.qkv[(w * t + i) * 3 * d..(w * t + i + 1) * 3 * d];
                    q[i * hd..(i + 1) * hd].copy_from_slice(&row[h * hd..(h + 1) * hd]);
                    k[i * hd..(i + 1) * hd].copy_from_slice(&row[d + h * hd..d + (h + 1) * hd]);
                    v[i * hd..(i + 1) * hd].copy_from_slice(&row[2 * d + h * hd..2 * d + (h + 1) * hd]);
                    d_o[i * hd..(i + 1) * hd].copy_from_slice(&d_attn[(w * t + i) * d + h * hd..(w * t + i) * d + (h + 1) * hd]);
                }
                let p = &trace.probs[(w * self.heads + h) * t * t..(w * self.heads + h + 1) * t * t];
                gemm(t, hd, t, &d_o, false, &v, true, 0.0, &mut d_p);
                gemm(t, t, hd, p, true, &d_o, false, 0.0, &mut d_v);
                {
                    let d_bias = grads.get_mut(self.rel_bias);
                    for i in 0..t {
                        let pr = &p[i * t..(i + 1) * t];
                        let dr = &mut d_p[i * t..(i + 1) * t];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (j, (dv, pv)) in dr.iter_mut().zip(pr).enumerate() {
                            *dv = pv * (*dv - dot);
                            d_bias[self.rel_index(m, i, j) * self.heads + h] += *dv;
                        }
                    }
                }
                gemm(t, t, hd, &d_p, false, &k, false, 0.0, &mut d_q);
                gemm(t, t, hd, &d_p, true, &q, false, 0.0, &mut d_k);
                for i in 0..t {
                    let row = &mut d_qkv[(w * t + i) * 3 * d..(w * t + i + 1) * 3 * d];
                    for c in 0..hd {
                        row[h * hd + c] = d_q[i * hd + c] * scale;
                        row[d + h * hd + c] = d_k[i * hd + c] * scale;
                        row[2 * d + h * hd + c] = d_v[i * hd + c];
                    }
                }
            }
        }
        let d_windows = self.qkv.backward(params, &trace.windows, &d_qkv, bw * t, grads);
        let d_h1 = layout.reverse(&d_windows, batch, d);
        let d_in = self.norm1.backward(params, &trace.ln1, &d_h1, grads);
        for (a, b) in d_x1.iter_mut().zip(&d_in) {
            *a += b;
        }
        TokenGrid {
            batch,
            grid_h: grad_out.grid_h,
            grid_w: grad_out.grid_w,
            dim: d,
            data: d_x1,
        }
    }
}

fn tokens_to_map(tokens: &TokenGrid) -> FeatureMap {
    let dims = Dims4::new(tokens.batch, tokens.dim, tokens.grid_h, tokens.grid_w);
    let l = tokens.len();
    FeatureMap::from_fn(dims, |b, c, y, x| tokens.data[(b * l + y * tokens.grid_w + x) * tokens.dim + c])
}

fn map_to_tokens(map: &FeatureMap) -> TokenGrid {
    let d = map.dims();
    let mut tokens = TokenGrid::zeros(d.batch, d.height, d.width, d.channels);
    let l = d.plane();
    for b in 0..d.batch {
        for c in 0..d.channels {
            for (i, v) in map.plane(b, c).iter().enumerate() {
                tokens.data[(b * l + i) * d.channels + c] = *v;
            }
        }
    }
    tokens
}

/// Dimension-matched convolution + leaky rectification used in place of a
/// transformer block when the transformer stage is ablated.
#[derive(Debug, Clone)]
pub struct ConvTokenBlock {
    conv: Conv2d,
    slope: f64,
}

impl ConvTokenBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, slope: f64, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(store, name, dim, dim, 3, 1, slope, rng),
            slope,
        }
    }

    fn forward(&self, params: &ParamStore, tokens: &TokenGrid) -> (TokenGrid, FeatureMap, FeatureMap) {
        let input = tokens_to_map(tokens);
        let mut out = self.conv.forward(params, &input);
        leaky_relu(out.data_mut(), self.slope);
        (map_to_tokens(&out), input, out)
    }

    fn backward(&self, params: &ParamStore, input: &FeatureMap, output: &FeatureMap, grad_out: &TokenGrid, grads: &mut Gradients) -> TokenGrid {
        let mut g = tokens_to_map(grad_out);
        leaky_relu_backward(g.data_mut(), output.data(), self.slope);
        map_to_tokens(&self.conv.backward(params, input, &g, grads))
    }
}

#[derive(Debug, Clone)]
enum TokenStage {
    Transformer(Vec<SwinBlock>),
    Convolution(Vec<ConvTokenBlock>),
}

#[derive(Debug, Clone)]
enum StageTrace {
    Transformer(Box<SwinTrace>),
    Convolution(FeatureMap, FeatureMap),
}

/// Activations kept by [`Decoder::forward_traced`].
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    input: FeatureMap,
    meta: PatchMeta,
    stages: Vec<StageTrace>,
    unembed_in: TokenGrid,
    cropped: FeatureMap,
    mid: FeatureMap,
    output: FeatureMap,
}

impl DecoderTrace {
    pub fn swin_traces(&self) -> impl Iterator<Item = &SwinTrace> {
        self.stages.iter().filter_map(|s| match s {
            StageTrace::Transformer(t) => Some(&**t),
            StageTrace::Convolution(..) => None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    embed: PatchEmbed,
    stage: TokenStage,
    unembed: Linear,
    conv_mid: Conv2d,
    conv_out: Conv2d,
    channels: usize,
    slope: f64,
}

impl Decoder {
    /// Builds the head; with `transformer` unset the attention blocks are
    /// replaced by convolution blocks of the same width.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &NetworkConfig, transformer: bool, rng: &mut R) -> Result<Self> {
        let c = cfg.encoder_channels;
        let dim = cfg.embed_dim;
        let p = cfg.patch_size;
        let embed = PatchEmbed::new(store, "decoder.embed", c, p, dim, rng);
        let stage = if transformer {
            let blocks = (0..cfg.decoder_depth)
                .map(|i| {
                    SwinBlock::new(
                        store,
                        &format!("decoder.stb.{i}"),
                        dim,
                        cfg.num_heads,
                        cfg.window_size,
                        cfg.mlp_ratio,
                        i % 2 == 1,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            TokenStage::Transformer(blocks)
        } else {
            TokenStage::Convolution(
                (0..cfg.decoder_depth)
                    .map(|i| ConvTokenBlock::new(store, &format!("decoder.convstage.{i}"), dim, cfg.negative_slope, rng))
                    .collect(),
            )
        };
        let unembed = Linear::new(store, "decoder.unembed", dim, p * p * c, 1.0 / math::sqrt(dim as f64), rng);
        let mid = (c / 2).max(1);
        let conv_mid = Conv2d::new(store, "decoder.conv_mid", c, mid, 3, 1, cfg.negative_slope, rng);
        let conv_out = Conv2d::new(store, "decoder.conv_out", mid, 1, 3, 1, 1.0, rng);
        Ok(Self {
            embed,
            stage,
            unembed,
            conv_mid,
            conv_out,
            channels: c,
            slope: cfg.negative_slope,
        })
    }

    pub fn patch_embed(&self) -> &PatchEmbed {
        &self.embed
    }

    pub fn transformer_blocks(&self) -> &[SwinBlock] {
        match &self.stage {
            TokenStage::Transformer(b) => b,
            TokenStage::Convolution(_) => &[],
        }
    }

    pub fn conv_blocks(&self) -> usize {
        match &self.stage {
            TokenStage::Transformer(_) => 0,
            TokenStage::Convolution(b) => b.len(),
        }
    }

    /// Un-embeds tokens into `[B, C, H, W]` (pixel rearrangement + crop).
    fn unembed_forward(&self, params: &ParamStore, tokens: &TokenGrid, meta: &PatchMeta) -> Result<FeatureMap> {
        if meta.grid() != (tokens.grid_h, tokens.grid_w) {
            return Err(Error::Config(format!(
                "token grid {}x{} is inconsistent with patch metadata {:?}",
                tokens.grid_h, tokens.grid_w, meta
            )));
        }
        let p = meta.patch;
        let c = self.channels;
        let n = tokens.batch * tokens.len();
        let rows = self.unembed.forward(params, &tokens.data, n);
        let dims = Dims4::new(tokens.batch, c, meta.height, meta.width);
        let l = tokens.len();
        Ok(FeatureMap::from_fn(dims, |b, ch, y, x| {
            let (ty, py) = (y / p, y % p);
            let (tx, px) = (x / p, x % p);
            rows[(b * l + ty * tokens.grid_w + tx) * c * p * p + (ch * p + py) * p + px]
        }))
    }

    fn unembed_backward(&self, params: &ParamStore, tokens: &TokenGrid, meta: &PatchMeta, grad: &FeatureMap, grads: &mut Gradients) -> TokenGrid {
        let p = meta.patch;
        let c = self.channels;
        let l = tokens.len();
        let n = tokens.batch * l;
        let mut d_rows = vec![0.0; n * c * p * p];
        let dims = grad.dims();
        for b in 0..dims.batch {
            for ch in 0..c {
                for y in 0..dims.height {
                    for x in 0..dims.width {
                        let (ty, py) = (y / p, y % p);
                        let (tx, px) = (x / p, x % p);
                        d_rows[(b * l + ty * tokens.grid_w + tx) * c * p * p + (ch * p + py) * p + px] = grad.at(b, ch, y, x);
                    }
                }
            }
        }
        let data = self.unembed.backward(params, &tokens.data, &d_rows, n, grads);
        TokenGrid {
            batch: tokens.batch,
            grid_h: tokens.grid_h,
            grid_w: tokens.grid_w,
            dim: tokens.dim,
            data,
        }
    }

    /// Maps a token grid back to a `[B, 1, H, W]` image in `(-1, 1)`.
    pub fn reconstruct(&self, params: &ParamStore, tokens: &TokenGrid, meta: &PatchMeta) -> Result<FeatureMap> {
        let cropped = self.unembed_forward(params, tokens, meta)?;
        let mut mid = self.conv_mid.forward(params, &cropped);
        leaky_relu(mid.data_mut(), self.slope);
        let mut out = self.conv_out.forward(params, &mid);
        for v in out.data_mut() {
            *v = math::tanh(*v);
        }
        Ok(out)
    }

    pub fn forward(&self, params: &ParamStore, fused: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_traced(params, fused)?.0)
    }

    pub fn forward_traced(&self, params: &ParamStore, fused: &FeatureMap) -> Result<(FeatureMap, DecoderTrace)> {
        let (mut tokens, meta) = self.embed.forward(params, fused)?;
        let mut stages = Vec::new();
        match &self.stage {
            TokenStage::Transformer(blocks) => {
                for block in blocks {
                    let (next, trace) = block.forward_traced(params, &tokens)?;
                    tokens = next;
                    stages.push(StageTrace::Transformer(Box::new(trace)));
                }
            }
            TokenStage::Convolution(blocks) => {
                for block in blocks {
                    let (next, input, output) = block.forward(params, &tokens);
                    tokens = next;
                    stages.push(StageTrace::Convolution(input, output));
                }
            }
        }
        let cropped = self.unembed_forward(params, &tokens, &meta)?;
        let mut mid = self.conv_mid.forward(params, &cropped);
        leaky_relu(mid.data_mut(), self.slope);
        let mut output = self.conv_out.forward(params, &mid);
        for v in output.data_mut() {
            *v = math::tanh(*v);
        }
        Ok((
            output.clone(),
            DecoderTrace {
                input: fused.clone(),
                meta,
                stages,
                unembed_in: tokens,
                cropped,
                mid,
                output,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the
    /// fused feature map.
    pub fn backward(&self, params: &ParamStore, trace: &DecoderTrace, grad_out: &FeatureMap, grads: &mut Gradients) -> FeatureMap {
        let mut g = grad_out.clone();
        tanh_backward(g.data_mut(), trace.output.data());
        let mut g = self.conv_out.backward(params, &trace.mid, &g, grads);
        leaky_relu_backward(g.data_mut(), trace.mid.data(), self.slope);
        let g = self.conv_mid.backward(params, &trace.cropped, &g, grads);
        let mut g_tokens = self.unembed_backward(params, &trace.unembed_in, &trace.meta, &g, grads);
        match &self.stage {
            TokenStage::Transformer(blocks) => {
                for (block, st) in blocks.iter().zip(&trace.stages).rev() {
                    if let StageTrace::Transformer(t) = st {
                        g_tokens = block.backward(params, t, &g_tokens, grads);
                    }
                }
            }
            TokenStage::Convolution(blocks) => {
                for (block, st) in blocks.iter().zip(&trace.stages).rev() {
                    if let StageTrace::Convolution(input, output) = st {
                        g_tokens = block.backward(params, input, output, &g_tokens, grads);
                    }
                }
            }
        }
        self.embed.backward(params, &trace.input, &trace.meta, &g_tokens, grads)
    }
}
