use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvsl::graph::Graph;
use rvsl::haze::*;
use rvsl::Tensor;

fn brute_dark_channel(img: &Tensor, patch: usize) -> Vec<f64> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let r = patch as isize / 2;
    let d = img.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut m = f64::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    for c in 0..3 {
                        m = m.min(d[c * h * w + (yy as usize) * w + xx as usize]);
                    }
                }
            }
            out[y as usize * w + x as usize] = m;
        }
    }
    out
}

fn procedural_depth(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        0.5 + 2.0 * y / h as f64 + 0.3 * (x * 0.7).sin().abs()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dark_channel_matches_brute_force(h in 1usize..=16, w in 1usize..=16, p in 0usize..4, seed in any::<u64>()) {
        let patch = 2 * p + 1;
        prop_assume!(patch <= h || patch <= w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let fast = dark_channel(&img, &DarkChannelConfig::new(patch).unwrap()).unwrap();
        prop_assert_eq!(fast.data(), &brute_dark_channel(&img, patch)[..]);
    }
}

#[test]
fn dark_channel_of_random_12x12_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = Tensor::uniform(&[3, 12, 12], 0.0, 1.0, &mut rng);
    let dc = dark_channel(&img, &DarkChannelConfig::default()).unwrap();
    assert_eq!(dc.data(), &brute_dark_channel(&img, 5)[..]);
    let c = dark_channel(&Tensor::full(&[3, 7, 7], 0.37), &DarkChannelConfig::default()).unwrap();
    assert!(c.data().iter().all(|&v| v == 0.37));
}

#[test]
fn dark_channel_rejects_oversized_patch() {
    let img = Tensor::zeros(&[3, 3, 4]);
    assert!(dark_channel(&img, &DarkChannelConfig { patch: 5 }).is_err());
    assert!(dark_channel(&Tensor::zeros(&[3, 3, 5]), &DarkChannelConfig { patch: 5 }).is_ok());
}

#[test]
fn graph_min_reduce_agrees_with_dark_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::uniform(&[3, 10, 13], 0.0, 1.0, &mut rng);
    let dc = dark_channel(&img, &DarkChannelConfig::default()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(img.reshape(&[1, 3, 10, 13]).unwrap());
    let m = g.min_reduce(x, 5).unwrap();
    assert_eq!(g.value(m).data(), dc.data());
}

#[test]
fn haze_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let j = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let t = Tensor::uniform(&[8, 8], 0.05, 1.0, &mut rng);
        let p = HazeParams::new(1.0, [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)]).unwrap();
        let i = synthesize_haze(&j, &t, &p).unwrap();
        let back = invert_haze(&i, &t, &p).unwrap();
        assert_eq!(back.clamped_pixels, 0);
        let err = back.image.zip_map(&j, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err < 1e-12, "{err}");
    }
    // procedural depth at beta 1
    let j = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let p = HazeParams::new(1.0, [0.8, 0.85, 0.9]).unwrap();
    let t = transmission_from_depth(&procedural_depth(16, 16), p.beta).unwrap();
    assert!(t.data().iter().all(|&v| v >= T_MIN));
    let i = synthesize_haze(&j, &t, &p).unwrap();
    let back = invert_haze(&i, &t, &p).unwrap();
    assert!(back.image.zip_map(&j, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-9);
}

#[test]
fn invert_of_pure_airlight_is_airlight_and_flags_clamping() {
    let p = HazeParams::new(1.0, [0.6, 0.7, 0.8]).unwrap();
    let hazy = Tensor::from_fn(&[3, 2, 2], |i| p.airlight[i / 4]);
    let t = Tensor::new(vec![2, 2], vec![0.5, 0.01, 0.3, 1.0]).unwrap();
    let inv = invert_haze(&hazy, &t, &p).unwrap();
    assert_eq!(inv.clamped_pixels, 1);
    for (k, v) in inv.image.data().iter().enumerate() {
        assert!((v - p.airlight[k / 4]).abs() < 1e-12);
    }
}

#[test]
fn synthesis_of_airlight_image_is_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = HazeParams::new(0.9, [0.55, 0.75, 0.95]).unwrap();
    let j = Tensor::from_fn(&[3, 4, 4], |i| p.airlight[i / 16]);
    let t = Tensor::uniform(&[4, 4], 0.0, 1.0, &mut rng);
    let i = synthesize_haze(&j, &t, &p).unwrap();
    assert!(i.zip_map(&j, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-15);
}

#[test]
fn colinearity_identity_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let j = Tensor::uniform(&[3, 6, 6], 0.0, 1.0, &mut rng);
        let t = Tensor::uniform(&[6, 6], 0.0, 1.0, &mut rng);
        let a = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let p = HazeParams { beta: 1.0, airlight: a };
        let i = synthesize_haze(&j, &t, &p).unwrap();
        let r = colinearity_residual(&j, &i, &a).unwrap();
        assert!(r.max_abs() < 1e-10, "{}", r.max_abs());
        let r = colinearity_residual(&j, &j, &a).unwrap();
        assert!(r.max_abs() < 1e-10);
    }
}

#[test]
fn conditional_dark_channel_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = HazeParams::new(1.0, [1.0, 1.0, 1.0]).unwrap();
    let cfg = DarkChannelConfig::default();
    for _ in 0..1000 {
        let j = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let t = Tensor::uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let i = synthesize_haze(&j, &t, &p).unwrap();
        assert!(i.data().iter().zip(j.data()).all(|(a, b)| a >= b));
        let (di, dj) = (dark_channel(&i, &cfg).unwrap(), dark_channel(&j, &cfg).unwrap());
        assert!(di.data().iter().zip(dj.data()).all(|(a, b)| a >= b));
    }
}

#[test]
fn airlight_recovered_from_dense_haze_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = HazeParams::new(1.0, [0.8, 0.8, 0.8]).unwrap();
    let j = Tensor::uniform(&[3, 32, 32], 0.0, 0.7, &mut rng);
    // far field (top rows) is almost opaque
    let depth = Tensor::from_fn(&[32, 32], |i| if i / 32 < 6 { 4.0 } else { 0.3 });
    let t = transmission_from_depth(&depth, p.beta).unwrap();
    assert!(t.data().iter().any(|&v| v < 0.05));
    let i = synthesize_haze(&j, &t, &p).unwrap();
    let a = estimate_airlight(&i, &DarkChannelConfig::default()).unwrap();
    for c in 0..3 {
        assert!((a[c] - 0.8).abs() < 0.05, "{a:?}");
    }
    let flat = estimate_airlight(&Tensor::full(&[3, 5, 5], 0.4), &DarkChannelConfig::default()).unwrap();
    assert_eq!(flat, [0.4, 0.4, 0.4]);
}

#[test]
fn transmission_is_monotone_in_beta_and_depth() {
    let betas: Vec<f64> = (1..=20).map(|k| k as f64 * 0.25).collect();
    let depths = Tensor::from_fn(&[1, 30], |i| i as f64 * 0.2);
    let mut prev: Option<Tensor> = None;
    for &b in &betas {
        let t = transmission_from_depth(&depths, b).unwrap();
        assert!(t.data().windows(2).all(|w| w[1] < w[0]));
        if let Some(pt) = &prev {
            assert!(t.data().iter().zip(pt.data()).skip(1).all(|(a, b)| a < b));
        }
        prev = Some(t);
    }
}
