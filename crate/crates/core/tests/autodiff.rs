use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvsl::gradcheck::{grad_check, GradCheckOptions};
use rvsl::graph::{Attrs, BnMode, Graph, NodeId, PrimitiveKind};
use rvsl::{Result, Tensor};

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

// Values bounded away from zero so relu/abs kinks are not straddled.
fn rand_away(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn weighted(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_t(g.shape(y), &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(name: &str, recipe: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let rep = grad_check(recipe, inputs, &GradCheckOptions::with_tolerance(1e-4)).unwrap();
    assert!(rep.passed(), "{name}: {rep:?}");
    assert!(rep.probes > 0, "{name}: no probes");
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x4 = rand_t(&[2, 3, 5, 5], &mut rng);
    let w = rand_t(&[4, 3, 3, 3], &mut rng);
    let b = rand_t(&[4], &mut rng);
    check(
        "conv2d",
        |g, p| {
            let y = g.conv2d(p[0], p[1], p[2], 2, 1)?;
            weighted(g, y, 1)
        },
        &[x4.clone(), w, b],
    );

    let xt = rand_t(&[2, 3, 3, 3], &mut rng);
    let wt = rand_t(&[3, 2, 4, 4], &mut rng);
    let bt = rand_t(&[2], &mut rng);
    check(
        "conv2d_transpose",
        |g, p| {
            let y = g.conv2d_transpose(p[0], p[1], p[2], 2, 1)?;
            weighted(g, y, 2)
        },
        &[xt, wt, bt],
    );

    let gamma = rand_t(&[3], &mut rng);
    let beta = rand_t(&[3], &mut rng);
    check(
        "batch_norm/train",
        |g, p| {
            let y = g.batch_norm_train(p[0], p[1], p[2], 1e-5)?;
            weighted(g, y, 3)
        },
        &[x4.clone(), gamma.clone(), beta.clone()],
    );
    check(
        "batch_norm/eval",
        |g, p| {
            let rm = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
            let rv = Tensor::new(vec![3], vec![0.5, 1.5, 0.9]).unwrap();
            let y = g.batch_norm_eval(p[0], p[1], p[2], rm, rv, 1e-5)?;
            weighted(g, y, 4)
        },
        &[x4.clone(), gamma, beta],
    );

    let xa = rand_away(&[2, 3, 4, 4], &mut rng);
    check("relu", |g, p| { let y = g.relu(p[0])?; weighted(g, y, 5) }, &[xa.clone()]);
    check("abs", |g, p| { let y = g.abs(p[0])?; weighted(g, y, 6) }, &[xa.clone()]);
    check("global_avg_pool", |g, p| { let y = g.global_avg_pool(p[0])?; weighted(g, y, 7) }, &[xa.clone()]);
    check("sigmoid", |g, p| { let y = g.sigmoid(p[0])?; weighted(g, y, 8) }, &[xa.clone()]);
    check("exp", |g, p| { let y = g.exp(p[0])?; weighted(g, y, 9) }, &[xa.clone()]);
    check(
        "log",
        |g, p| {
            let a = g.abs(p[0])?;
            let y = g.log(a)?;
            weighted(g, y, 10)
        },
        &[xa.clone()],
    );
    check("mul_scalar", |g, p| { let y = g.mul_scalar(p[0], -1.7)?; weighted(g, y, 11) }, &[xa.clone()]);
    check("add_scalar", |g, p| { let y = g.add_scalar(p[0], 0.3)?; weighted(g, y, 12) }, &[xa.clone()]);
    check("sum", |g, p| { let s = g.sum(p[0])?; g.mul(s, s) }, &[xa.clone()]);
    check("mean", |g, p| { let s = g.mean(p[0])?; g.mul(s, s) }, &[xa.clone()]);
    check("sum_axis", |g, p| { let y = g.sum_axis(p[0], 1)?; weighted(g, y, 13) }, &[xa.clone()]);
    check("l2_normalize", |g, p| { let y = g.l2_normalize(p[0], 1)?; weighted(g, y, 14) }, &[xa.clone()]);
    check("min_reduce", |g, p| { let y = g.min_reduce(p[0], 3)?; weighted(g, y, 15) }, &[xa.clone()]);
    check("clamp", |g, p| { let y = g.clamp(p[0], -0.5, 0.5)?; weighted(g, y, 16) }, &[xa.clone()]);
    check("spatial_diff/h", |g, p| { let y = g.spatial_diff(p[0], 2)?; weighted(g, y, 17) }, &[xa.clone()]);
    check("spatial_diff/w", |g, p| { let y = g.spatial_diff(p[0], 3)?; weighted(g, y, 18) }, &[xa.clone()]);
    check(
        "select",
        |g, p| {
            let y = g.select(p[0], vec![0, 5, 5, 17, 40])?;
            weighted(g, y, 19)
        },
        &[xa.clone()],
    );

    let ya = rand_away(&[2, 3, 4, 4], &mut rng);
    check("add", |g, p| { let y = g.add(p[0], p[1])?; weighted(g, y, 20) }, &[xa.clone(), ya.clone()]);
    check("sub", |g, p| { let y = g.sub(p[0], p[1])?; weighted(g, y, 21) }, &[xa.clone(), ya.clone()]);
    check("mul", |g, p| { let y = g.mul(p[0], p[1])?; weighted(g, y, 22) }, &[xa.clone(), ya.clone()]);
    let za = rand_away(&[2, 1, 4, 4], &mut rng);
    check("concat/channels", |g, p| { let y = g.concat_channels(p[0], p[1])?; weighted(g, y, 23) }, &[xa.clone(), za]);
    let zb = rand_away(&[1, 3, 4, 4], &mut rng);
    check("concat/batch", |g, p| { let y = g.concat(p[0], p[1], 0)?; weighted(g, y, 24) }, &[xa, zb]);

    let x2 = rand_t(&[4, 6], &mut rng);
    let wd = rand_t(&[3, 6], &mut rng);
    let bd = rand_t(&[3], &mut rng);
    check("dense", |g, p| { let y = g.dense(p[0], p[1], p[2])?; weighted(g, y, 25) }, &[x2.clone(), wd, bd]);
    check("softmax", |g, p| { let y = g.softmax(p[0])?; weighted(g, y, 26) }, &[x2.clone()]);
    check("log_softmax", |g, p| { let y = g.log_softmax(p[0])?; weighted(g, y, 27) }, &[x2.clone()]);
    check(
        "batch_norm/rank2",
        |g, p| {
            let gm = g.constant(Tensor::full(&[6], 1.3));
            let bt = g.constant(Tensor::full(&[6], -0.2));
            let y = g.batch_norm_train(p[0], gm, bt, 1e-5)?;
            weighted(g, y, 28)
        },
        &[x2.clone()],
    );
    check("pairwise_distance", |g, p| { let y = g.pairwise_distance(p[0])?; weighted(g, y, 29) }, &[x2]);
}

#[test]
fn three_layer_conv_relu_dense_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        rand_t(&[2, 3, 8, 8], &mut rng),
        rand_t(&[4, 3, 3, 3], &mut rng),
        rand_t(&[4], &mut rng),
        rand_t(&[6, 4, 3, 3], &mut rng),
        rand_t(&[6], &mut rng),
        rand_t(&[5, 6], &mut rng),
        rand_t(&[5], &mut rng),
    ];
    let recipe = |g: &mut Graph, p: &[NodeId]| -> Result<NodeId> {
        let h = g.conv2d(p[0], p[1], p[2], 1, 1)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, p[3], p[4], 2, 1)?;
        let h = g.relu(h)?;
        let h = g.global_avg_pool(h)?;
        let y = g.dense(h, p[5], p[6])?;
        weighted(g, y, 99)
    };
    let rep = grad_check(recipe, &inputs, &GradCheckOptions::with_tolerance(1e-4)).unwrap();
    assert!(rep.passed(), "{rep:?}");
    assert!(rep.probes > 300);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.param(rand_t(&[2, 3, 6, 6], &mut rng));
        let w = g.param(rand_t(&[4, 3, 3, 3], &mut rng));
        let b = g.param(rand_t(&[4], &mut rng));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let gm = g.param(Tensor::ones(&[4]));
        let bt = g.param(Tensor::zeros(&[4]));
        let y = g.batch_norm_train(y, gm, bt, 1e-5).unwrap();
        let y = g.min_reduce(y, 3).unwrap();
        let s = g.mean(y).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(s).clone(), grads.get(w).unwrap().clone(), grads.get(x).unwrap().clone())
    };
    let a = build();
    let b = build();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xv = rand_t(&[3, 4], &mut rng);
    let (a, b) = (0.7, -2.3);
    let grad_of = |ca: f64, cb: f64| {
        let mut g = Graph::new();
        let x = g.param(xv.clone());
        let s = g.sigmoid(x).unwrap();
        let f = g.sum(s).unwrap();
        let e = g.exp(x).unwrap();
        let q = g.mul(e, x).unwrap();
        let h = g.mean(q).unwrap();
        let fa = g.mul_scalar(f, ca).unwrap();
        let hb = g.mul_scalar(h, cb).unwrap();
        let root = g.add(fa, hb).unwrap();
        g.backward(root).unwrap().get(x).unwrap().clone()
    };
    let combined = grad_of(a, b);
    let gf = grad_of(1.0, 0.0);
    let gh = grad_of(0.0, 1.0);
    for i in 0..combined.numel() {
        let expect = a * gf.data()[i] + b * gh.data()[i];
        assert!((combined.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn build_node_rejects_bad_attributes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
    let w = g.param(Tensor::ones(&[1, 1, 2, 2]));
    let b = g.param(Tensor::zeros(&[1]));
    let zero_stride = Attrs { stride: 0, ..Attrs::default() };
    assert!(g.build_node(PrimitiveKind::Conv2d, &[x, w, b], &zero_stride).is_err());
    let even_patch = Attrs { patch: 4, ..Attrs::default() };
    assert!(g.build_node(PrimitiveKind::MinReduce, &[x], &even_patch).is_err());
    let eval_without_stats = Attrs { mode: BnMode::Eval, ..Attrs::default() };
    let gm = g.param(Tensor::ones(&[1]));
    assert!(g
        .build_node(PrimitiveKind::BatchNorm, &[x, gm, b], &eval_without_stats)
        .is_err());
    let err = g.add(x, gm).unwrap_err().to_string();
    assert!(err.contains("[1, 1, 4, 4]"), "{err}");
}

#[test]
fn clamp_stopgrad_inputs_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[4], 0.3));
    let c = g.clamp_stopgrad(x, 0.0, 1.0).unwrap();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).is_none());
}
