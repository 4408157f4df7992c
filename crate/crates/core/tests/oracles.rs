mod common;

use common::oracles;
use crossfuse_core::decoder::{window_partition, window_reverse, WindowLayout, MASK_VALUE};
use crossfuse_core::metrics::{fmi, mutual_information, qcv, Plane};
use crossfuse_core::nca::NcaBlock;
use crossfuse_core::{Dims4, FeatureMap, ParamStore, TokenGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(rng: &mut ChaCha8Rng, dims: Dims4) -> FeatureMap {
    FeatureMap::from_fn(dims, |_, _, _, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn textured(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Plane {
    let phase = rng.random::<f64>() * 6.0;
    Plane::from_fn(w, h, |x, y| {
        let base = 128.0 + 70.0 * ((x as f64) * 0.35 + phase).sin() * ((y as f64) * 0.21).cos();
        (base + rng.random::<f64>() * 30.0).round().clamp(0.0, 255.0)
    })
}

#[test]
fn nca_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let block = NcaBlock::new(&mut store, "nca");
    for &alpha in &[0.0, 0.8, -1.7] {
        store.get_mut(block.alpha).data_mut()[0] = alpha;
        for _ in 0..10 {
            let d = Dims4::new(2, 8, 4, 5);
            let (p, v) = (random_map(&mut rng, d), random_map(&mut rng, d));
            let fast = block.forward(&store, &p, &v).unwrap();
            let slow = oracles::nca_double_loop(&p, &v, alpha);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }
}

#[test]
fn ssim_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_map(&mut rng, Dims4::new(2, 1, 14, 17));
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = (*v * 0.7 + (rng.random::<f64>() - 0.5) * 0.4).clamp(-1.0, 1.0);
    }
    let fast = crossfuse_core::losses::ssim(&x, &y).unwrap();
    assert!((fast - oracles::ssim_naive(&x, &y)).abs() < 1e-12);
}

#[test]
fn mutual_information_matches_histogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let a = textured(&mut rng, 40, 33);
        let b = textured(&mut rng, 40, 33);
        for bins in [2, 16, 256] {
            assert!((mutual_information(&a, &b, bins) - oracles::mi_oracle(&a, &b, bins)).abs() < 1e-10);
        }
        let f = textured(&mut rng, 40, 33);
        assert!((fmi(&f, &a, &b).unwrap() - oracles::fmi_oracle(&f, &a, &b)).abs() < 1e-10);
    }
}

#[test]
fn qcv_matches_region_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (w, h) in [(32, 32), (37, 29)] {
        let (a, b, f) = (textured(&mut rng, w, h), textured(&mut rng, w, h), textured(&mut rng, w, h));
        let fast = qcv(&f, &a, &b).unwrap();
        let slow = oracles::qcv_region_loop(&f, &a, &b);
        assert!((fast - slow).abs() <= 1e-8 * slow.abs().max(1.0), "{fast} vs {slow}");
    }
}

#[test]
fn shifted_mask_matches_wrap_rule() {
    for (gh, gw, m, s) in [(8, 8, 4, 2), (6, 10, 4, 2), (9, 9, 3, 1), (16, 12, 8, 4)] {
        let layout = WindowLayout::new(gh, gw, m, s);
        let mask = layout.mask().unwrap();
        let nww = layout.padded_w / m;
        let t = m * m;
        for w in 0..layout.num_windows() {
            let origin = ((w / nww) * m, (w % nww) * m);
            for i in 0..t {
                for j in 0..t {
                    let allowed = oracles::shifted_pair_allowed(origin, i, j, m, s, (layout.padded_h, layout.padded_w));
                    let v = mask[(w * t + i) * t + j];
                    assert_eq!(v == 0.0, allowed, "window {w} pair ({i},{j})");
                    assert!(v == 0.0 || v == MASK_VALUE);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn window_roundtrip_is_exact(b in 1usize..3, gh in 1usize..11, gw in 1usize..11, m in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 3;
        let data: Vec<f64> = (0..b * gh * gw * dim).map(|_| rng.random::<f64>()).collect();
        let grid = TokenGrid::from_vec(b, gh, gw, dim, data).unwrap();
        let back = window_reverse(&window_partition(&grid, m));
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn attention_rows_are_stochastic(c in 1usize..6, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Dims4::new(1, c, h, w);
        let (p, v) = (random_map(&mut rng, d), random_map(&mut rng, d));
        let weights = crossfuse_core::nca::channel_affinity(&v, &p).unwrap().normalized();
        for row in weights.chunks(c) {
            prop_assert!(row.iter().all(|&x| x > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn metrics_are_flip_invariant(seed in any::<u64>()) {
        // width is a whole number of Q_cv regions so flipping maps regions onto regions
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, f) = (textured(&mut rng, 32, 20), textured(&mut rng, 32, 20), textured(&mut rng, 32, 20));
        let (fa, fb, ff) = (a.flip_horizontal(), b.flip_horizontal(), f.flip_horizontal());
        let p0 = crossfuse_core::metrics::psnr_fusion(&f, &a, &b).unwrap().db;
        let p1 = crossfuse_core::metrics::psnr_fusion(&ff, &fa, &fb).unwrap().db;
        prop_assert!((p0 - p1).abs() < 1e-9);
        prop_assert!((fmi(&f, &a, &b).unwrap() - fmi(&ff, &fa, &fb).unwrap()).abs() < 1e-9);
        let (q0, q1) = (qcv(&f, &a, &b).unwrap(), qcv(&ff, &fa, &fb).unwrap());
        prop_assert!((q0 - q1).abs() <= 1e-9 * q0.max(1.0));
    }

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Dims4::new(1, 1, 12, 13);
        let (x, y) = (random_map(&mut rng, d), random_map(&mut rng, d));
        let s = crossfuse_core::losses::ssim(&x, &y).unwrap();
        prop_assert!((s - crossfuse_core::losses::ssim(&y, &x).unwrap()).abs() < 1e-7);
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
