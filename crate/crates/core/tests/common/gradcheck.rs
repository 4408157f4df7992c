//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance suite. Each check returns `(label, relative error)` rows; see
//! [`rel_err`].

#![allow(dead_code)]

use crossfuse_core::bfm::{fuse_branches, fuse_branches_backward};
use crossfuse_core::decoder::Decoder;
use crossfuse_core::encoder::Encoder;
use crossfuse_core::losses::{ssim_grad, total_loss, total_loss_grad, LossWeights};
use crossfuse_core::nca::NcaBlock;
use crossfuse_core::{AblationFlags, Dims4, FeatureMap, FusionNet, Gradients, NetworkConfig, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

pub type Rows = Vec<(String, f64)>;

/// Central, forward and backward difference quotients of one coordinate.
pub type Stencil = [f64; 3];

/// Norm-wise relative error of `analytic` against the numeric estimates.
/// A leaky-ReLU kink inside a stencil corrupts at most one side, so each
/// coordinate is compared with whichever of its three quotients is nearest.
pub fn rel_err(analytic: &[f64], numeric: &[Stencil]) -> f64 {
    let picked: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .map(|(a, s)| *s.iter().min_by(|p, q| (*p - a).abs().total_cmp(&(*q - a).abs())).unwrap())
        .collect();
    let diff: f64 = analytic.iter().zip(&picked).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = picked.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Difference quotients of `f` at `x`, one stencil per coordinate.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<Stencil> {
    let mut probe = x.to_vec();
    let centre = f(x);
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            [(up - down) / (2.0 * STEP), (up - centre) / STEP, (centre - down) / STEP]
        })
        .collect()
}

/// Numeric gradient of `f` with respect to every parameter array in `store`.
pub fn numeric_param_grads(store: &ParamStore, mut f: impl FnMut(&ParamStore) -> f64) -> Vec<Vec<Stencil>> {
    let mut probe = store.clone();
    store
        .ids()
        .map(|id| {
            let base = store.get(id).data().to_vec();
            numeric_grad(&base, |v| {
                probe.get_mut(id).data_mut().copy_from_slice(v);
                let out = f(&probe);
                probe.get_mut(id).data_mut().copy_from_slice(&base);
                out
            })
        })
        .collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, dims: Dims4, scale: f64) -> FeatureMap {
    FeatureMap::from_fn(dims, |_, _, _, _| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

fn dot(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn param_rows(prefix: &str, store: &ParamStore, analytic: &Gradients, numeric: &[Vec<Stencil>], rows: &mut Rows) {
    for (id, num) in store.ids().zip(numeric) {
        rows.push((format!("{prefix} d/d {}", store.name(id)), rel_err(analytic.get(id), num)));
    }
}

/// Small network configuration: every component active, shifted windows
/// exercised on a 4x4 token grid.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        encoder_channels: 8,
        encoder_dilations: vec![1, 2, 1],
        embed_dim: 8,
        num_heads: 2,
        window_size: 2,
        decoder_depth: 2,
        mlp_ratio: 2,
        ..NetworkConfig::default()
    }
}

pub fn check_encoder() -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "encoder", &tiny_config(), &mut rng);
    let x = random_map(&mut rng, Dims4::new(1, 1, 8, 8), 1.0);
    let g = random_map(&mut rng, Dims4::new(1, 8, 8, 8), 1.0);
    let trace = enc.encode_traced(&store, &x).unwrap();
    let mut grads = Gradients::zeros_like(&store);
    let dx = enc.backward(&store, &trace, &g, &mut grads);
    let objective = |s: &ParamStore, x: &FeatureMap| dot(&enc.encode(s, x).unwrap(), &g);
    let num_x = numeric_grad(x.data(), |v| objective(&store, &FeatureMap::from_vec(x.dims(), v.to_vec()).unwrap()));
    let mut rows = vec![("encoder d/d input".to_string(), rel_err(dx.data(), &num_x))];
    let num_p = numeric_param_grads(&store, |s| objective(s, &x));
    param_rows("encoder", &store, &grads, &num_p, &mut rows);
    rows
}

pub fn check_nca() -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let block = NcaBlock::new(&mut store, "nca");
    let alpha = store.find("nca.alpha").unwrap();
    store.get_mut(alpha).data_mut()[0] = 0.7;
    let d = Dims4::new(1, 8, 8, 8);
    let p = random_map(&mut rng, d, 1.0);
    let v = random_map(&mut rng, d, 1.0);
    let g = random_map(&mut rng, d, 1.0);
    let (_, trace) = block.forward_traced(&store, &p, &v).unwrap();
    let mut grads = Gradients::zeros_like(&store);
    let (dp, dv) = block.backward(&store, &p, &v, &trace, &g, &mut grads);
    let objective = |s: &ParamStore, p: &FeatureMap, v: &FeatureMap| dot(&block.forward(s, p, v).unwrap(), &g);
    let num_p = numeric_grad(p.data(), |x| objective(&store, &FeatureMap::from_vec(d, x.to_vec()).unwrap(), &v));
    let num_v = numeric_grad(v.data(), |x| objective(&store, &p, &FeatureMap::from_vec(d, x.to_vec()).unwrap()));
    let mut rows = vec![
        ("nca d/d primary".to_string(), rel_err(dp.data(), &num_p)),
        ("nca d/d vice".to_string(), rel_err(dv.data(), &num_v)),
    ];
    let num_a = numeric_param_grads(&store, |s| objective(s, &p, &v));
    param_rows("nca", &store, &grads, &num_a, &mut rows);
    rows
}

pub fn check_bfm() -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = Dims4::new(1, 8, 8, 8);
    let a = random_map(&mut rng, d, 3.0);
    let b = random_map(&mut rng, d, 3.0);
    let g = random_map(&mut rng, d, 1.0);
    let (da, db) = fuse_branches_backward(&a, &b, &g);
    let objective = |a: &FeatureMap, b: &FeatureMap| dot(&fuse_branches(a, b).unwrap(), &g);
    let num_a = numeric_grad(a.data(), |x| objective(&FeatureMap::from_vec(d, x.to_vec()).unwrap(), &b));
    let num_b = numeric_grad(b.data(), |x| objective(&a, &FeatureMap::from_vec(d, x.to_vec()).unwrap()));
    vec![
        ("bfm d/d branch 1".to_string(), rel_err(da.data(), &num_a)),
        ("bfm d/d branch 2".to_string(), rel_err(db.data(), &num_b)),
    ]
}

pub fn check_decoder() -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let cfg = tiny_config();
    let dec = Decoder::new(&mut store, &cfg, true, &mut rng).unwrap();
    let x = random_map(&mut rng, Dims4::new(1, 8, 8, 8), 1.0);
    let g = random_map(&mut rng, Dims4::new(1, 1, 8, 8), 1.0);
    let (_, trace) = dec.forward_traced(&store, &x).unwrap();
    assert!(trace.swin_traces().any(|t| t.layout().shift > 0), "shifted windows not exercised");
    let mut grads = Gradients::zeros_like(&store);
    let dx = dec.backward(&store, &trace, &g, &mut grads);
    let objective = |s: &ParamStore, x: &FeatureMap| dot(&dec.forward(s, x).unwrap(), &g);
    let num_x = numeric_grad(x.data(), |v| objective(&store, &FeatureMap::from_vec(x.dims(), v.to_vec()).unwrap()));
    let mut rows = vec![("decoder d/d input".to_string(), rel_err(dx.data(), &num_x))];
    let num_p = numeric_param_grads(&store, |s| objective(s, &x));
    param_rows("decoder", &store, &grads, &num_p, &mut rows);
    rows
}

/// SSIM needs at least an 11x11 window, so this uses 11x12 images.
pub fn check_ssim() -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let d = Dims4::new(1, 1, 11, 12);
    let x = random_map(&mut rng, d, 0.8);
    let y = random_map(&mut rng, d, 0.8);
    let (_, dx) = ssim_grad(&x, &y).unwrap();
    let num = numeric_grad(x.data(), |v| {
        crossfuse_core::losses::ssim(&FeatureMap::from_vec(d, v.to_vec()).unwrap(), &y).unwrap()
    });
    vec![("ssim d/d output".to_string(), rel_err(dx.data(), &num))]
}

pub fn check_total_loss() -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let d = Dims4::new(1, 1, 12, 11);
    let x = random_map(&mut rng, d, 0.8);
    let y = random_map(&mut rng, d, 0.8);
    let w = LossWeights::default();
    let (_, dx) = total_loss_grad(&x, &y, w).unwrap();
    let num = numeric_grad(x.data(), |v| total_loss(&FeatureMap::from_vec(d, v.to_vec()).unwrap(), &y, w).unwrap());
    vec![("total loss d/d output".to_string(), rel_err(dx.data(), &num))]
}

/// End to end through encoder, both attention blocks, fusion and decoder.
pub fn check_full_model() -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut net = FusionNet::new(tiny_config(), AblationFlags::FULL, 3).unwrap();
    for name in ["nca.0.alpha", "nca.1.alpha"] {
        let id = net.params().find(name).unwrap();
        net.params_mut().get_mut(id).data_mut()[0] = 0.5;
    }
    let d = Dims4::new(1, 1, 8, 8);
    let a = random_map(&mut rng, d, 1.0);
    let b = random_map(&mut rng, d, 1.0);
    let g = random_map(&mut rng, d, 1.0);
    let (_, trace) = net.forward_traced(&a, &b).unwrap();
    let mut grads = Gradients::zeros_like(net.params());
    let (da, db) = net.backward(&trace, &g, &mut grads);
    let objective = |n: &FusionNet, a: &FeatureMap, b: &FeatureMap| dot(&n.fuse(a, b).unwrap(), &g);
    let num_a = numeric_grad(a.data(), |v| objective(&net, &FeatureMap::from_vec(d, v.to_vec()).unwrap(), &b));
    let num_b = numeric_grad(b.data(), |v| objective(&net, &a, &FeatureMap::from_vec(d, v.to_vec()).unwrap()));
    let mut rows = vec![
        ("model d/d input 1".to_string(), rel_err(da.data(), &num_a)),
        ("model d/d input 2".to_string(), rel_err(db.data(), &num_b)),
    ];
    let mut probe = net.clone();
    let num_p = numeric_param_grads(net.params(), |s| {
        *probe.params_mut() = s.clone();
        objective(&probe, &a, &b)
    });
    param_rows("model", net.params(), &grads, &num_p, &mut rows);
    rows
}
