//! The shipped finite-difference suite: every primitive, every loss, and
//! the network paths the trainer differentiates through.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, NodeId};
use crate::haze::{estimate_airlight, DarkChannelConfig};
use crate::loss::{self, LossWeights, Stage, TripletConfig};
use crate::net::{bind, build_models, decode_image, discriminate, encode, reid_head, BlockId, Bound, Ctx, Mode, ModuleSet, NetConfig};
use crate::tensor::Tensor;
use crate::train::{clear_stage_parts_with_airlight, hazy_stage_parts, CycleState};

/// Tolerance for single primitives and losses.
pub const LOSS_TOLERANCE: f64 = 1e-4;
/// Tolerance for paths through the networks.
pub const PATH_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Primitive,
    Loss,
    Path,
}

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub tier: Tier,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.report.probes > 0
    }
}

type Recipe<'a> = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a>;

struct Runner {
    cases: Vec<SuiteCase>,
}

impl Runner {
    fn run(&mut self, name: &str, tier: Tier, inputs: &[Tensor], probes: Option<usize>, recipe: Recipe<'_>) -> Result<()> {
        let tol = if tier == Tier::Path { PATH_TOLERANCE } else { LOSS_TOLERANCE };
        let mut opts = GradCheckOptions::with_tolerance(tol);
        opts.max_probes_per_tensor = probes;
        let t = Instant::now();
        let report = grad_check(recipe, inputs, &opts)?;
        self.cases.push(SuiteCase { name: name.to_string(), tier, report, elapsed: t.elapsed() });
        Ok(())
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

// Bounded away from zero so relu and abs kinks are not straddled.
fn away(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn weighted(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn primitives(r: &mut Runner) -> Result<()> {
    use Tier::Primitive as P;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x4 = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng);
    let conv = [x4.clone(), uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng), uniform(&[4], -1.0, 1.0, &mut rng)];
    r.run("conv2d", P, &conv, None, Box::new(|g, p| {
        let y = g.conv2d(p[0], p[1], p[2], 2, 1)?;
        weighted(g, y, 1)
    }))?;
    let tconv = [
        uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng),
        uniform(&[3, 2, 4, 4], -1.0, 1.0, &mut rng),
        uniform(&[2], -1.0, 1.0, &mut rng),
    ];
    r.run("conv2d_transpose", P, &tconv, None, Box::new(|g, p| {
        let y = g.conv2d_transpose(p[0], p[1], p[2], 2, 1)?;
        weighted(g, y, 2)
    }))?;
    let bn = [x4, uniform(&[3], -1.0, 1.0, &mut rng), uniform(&[3], -1.0, 1.0, &mut rng)];
    r.run("batch_norm_train", P, &bn, None, Box::new(|g, p| {
        let y = g.batch_norm_train(p[0], p[1], p[2], 1e-5)?;
        weighted(g, y, 3)
    }))?;
    r.run("batch_norm_eval", P, &bn, None, Box::new(|g, p| {
        let rm = Tensor::new(vec![3], vec![0.1, -0.2, 0.3])?;
        let rv = Tensor::new(vec![3], vec![0.5, 1.5, 0.9])?;
        let y = g.batch_norm_eval(p[0], p[1], p[2], rm, rv, 1e-5)?;
        weighted(g, y, 4)
    }))?;

    let xa = [away(&[2, 3, 4, 4], &mut rng)];
    type Unary = fn(&mut Graph, NodeId) -> Result<NodeId>;
    let unary: [(&str, Unary); 13] = [
        ("relu", |g, x| g.relu(x)),
        ("abs", |g, x| g.abs(x)),
        ("global_avg_pool", |g, x| g.global_avg_pool(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("exp", |g, x| g.exp(x)),
        ("log", |g, x| {
            let a = g.abs(x)?;
            g.log(a)
        }),
        ("mul_scalar", |g, x| g.mul_scalar(x, -1.7)),
        ("add_scalar", |g, x| g.add_scalar(x, 0.3)),
        ("sum_axis", |g, x| g.sum_axis(x, 1)),
        ("l2_normalize", |g, x| g.l2_normalize(x, 1)),
        ("min_reduce", |g, x| g.min_reduce(x, 3)),
        ("clamp", |g, x| g.clamp(x, -0.5, 0.5)),
        ("select", |g, x| g.select(x, vec![0, 5, 5, 17, 40])),
    ];
    for (i, (name, f)) in unary.into_iter().enumerate() {
        r.run(name, P, &xa, None, Box::new(move |g, p| {
            let y = f(g, p[0])?;
            weighted(g, y, 10 + i as u64)
        }))?;
    }
    for (name, axis) in [("spatial_diff_h", 2), ("spatial_diff_w", 3)] {
        r.run(name, P, &xa, None, Box::new(move |g, p| {
            let y = g.spatial_diff(p[0], axis)?;
            weighted(g, y, 30 + axis as u64)
        }))?;
    }
    r.run("sum", P, &xa, None, Box::new(|g, p| {
        let s = g.sum(p[0])?;
        g.mul(s, s)
    }))?;
    r.run("mean", P, &xa, None, Box::new(|g, p| {
        let s = g.mean(p[0])?;
        g.mul(s, s)
    }))?;

    let pair = [xa[0].clone(), away(&[2, 3, 4, 4], &mut rng)];
    type Binary = fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>;
    let binary: [(&str, Binary); 3] = [("add", |g, a, b| g.add(a, b)), ("sub", |g, a, b| g.sub(a, b)), ("mul", |g, a, b| g.mul(a, b))];
    for (i, (name, f)) in binary.into_iter().enumerate() {
        r.run(name, P, &pair, None, Box::new(move |g, p| {
            let y = f(g, p[0], p[1])?;
            weighted(g, y, 40 + i as u64)
        }))?;
    }
    let cc = [xa[0].clone(), away(&[2, 1, 4, 4], &mut rng)];
    r.run("concat_channels", P, &cc, None, Box::new(|g, p| {
        let y = g.concat_channels(p[0], p[1])?;
        weighted(g, y, 50)
    }))?;
    let cb = [xa[0].clone(), away(&[1, 3, 4, 4], &mut rng)];
    r.run("concat_batch", P, &cb, None, Box::new(|g, p| {
        let y = g.concat(p[0], p[1], 0)?;
        weighted(g, y, 51)
    }))?;

    let x2 = uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let dense = [x2.clone(), uniform(&[3, 6], -1.0, 1.0, &mut rng), uniform(&[3], -1.0, 1.0, &mut rng)];
    r.run("dense", P, &dense, None, Box::new(|g, p| {
        let y = g.dense(p[0], p[1], p[2])?;
        weighted(g, y, 60)
    }))?;
    let m = [x2];
    r.run("softmax", P, &m, None, Box::new(|g, p| {
        let y = g.softmax(p[0])?;
        weighted(g, y, 61)
    }))?;
    r.run("log_softmax", P, &m, None, Box::new(|g, p| {
        let y = g.log_softmax(p[0])?;
        weighted(g, y, 62)
    }))?;
    r.run("pairwise_distance", P, &m, None, Box::new(|g, p| {
        let y = g.pairwise_distance(p[0])?;
        weighted(g, y, 63)
    }))?;
    Ok(())
}

fn losses(r: &mut Runner) -> Result<()> {
    use Tier::Loss as L;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dc = DarkChannelConfig::default();
    let a = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let b = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let ab = [a.clone(), b.clone()];
    r.run("loss_domain_transform", L, &ab, None, Box::new(|g, p| loss::l_domain_transform(g, p[0], p[1])))?;
    r.run("loss_render_consistency", L, &ab, None, Box::new(|g, p| loss::l_render_consistency(g, p[0], p[1])))?;
    r.run("loss_midc", L, &ab, None, Box::new(|g, p| Ok(loss::l_midc(g, p[0], p[1], &dc)?.loss)))?;
    let airlights = (0..2).map(|i| estimate_airlight(&b.slice_outer(i), &dc)).collect::<Result<Vec<_>>>()?;
    r.run("loss_colinear", L, &ab, None, Box::new(|g, p| loss::l_colinear_with_airlight(g, p[0], p[1], &airlights)))?;
    r.run("loss_dark_channel", L, &ab[..1], None, Box::new(|g, p| loss::l_dark_channel(g, p[0], &dc)))?;
    r.run("loss_total_variation", L, &ab[..1], None, Box::new(|g, p| loss::l_total_variation(g, p[0])))?;

    let e = [uniform(&[8, 6], -1.0, 1.0, &mut rng), uniform(&[8, 6], -1.0, 1.0, &mut rng)];
    let labels: Vec<u64> = (0..8).map(|i| i / 2).collect();
    let tri = TripletConfig { margin: 1.5 };
    r.run("loss_triplet", L, &e[..1], None, Box::new(|g, p| loss::l_triplet_batch_hard(g, p[0], &labels, &tri)))?;
    r.run("loss_embedding_consistency", L, &e, None, Box::new(|g, p| loss::l_embedding_consistency(g, p[0], p[1])))?;
    let logits = [uniform(&[8, 5], -2.0, 2.0, &mut rng)];
    r.run("loss_id_cross_entropy", L, &logits, None, Box::new(|g, p| loss::l_id_cross_entropy(g, p[0], &[0, 1, 2, 3, 4, 0, 1, 2])))?;
    let pq = [uniform(&[4, 1], 0.05, 0.95, &mut rng), uniform(&[4, 1], 0.05, 0.95, &mut rng)];
    r.run("loss_discriminator", L, &pq, None, Box::new(|g, p| loss::d_loss(g, p[0], p[1])))?;
    r.run("loss_generator", L, &pq[1..], None, Box::new(|g, p| loss::g_loss(g, p[0])))?;
    Ok(())
}

fn small_net(image_size: usize, stages: usize) -> NetConfig {
    NetConfig {
        image_size,
        base_channels: 4,
        encoder_blocks: 2,
        backbone_stages: stages,
        embedding_dim: 8,
        num_classes: Some(4),
        discriminator_channels: 4,
    }
}

/// Leaves are `[images, params of blocks...]`; the recipe sees them bound.
fn path_inputs(m: &ModuleSet, blocks: &[BlockId], x: Tensor) -> (Vec<Tensor>, Vec<(BlockId, String)>) {
    let mut vals = vec![x];
    let mut names = Vec::new();
    for &b in blocks {
        for p in m.block(b).trainable() {
            vals.push(p.value.clone());
            names.push((b, p.name.clone()));
        }
    }
    (vals, names)
}

fn rebind(leaves: &[NodeId], names: &[(BlockId, String)]) -> HashMap<BlockId, Bound> {
    let mut out: HashMap<BlockId, Bound> = HashMap::new();
    for (&id, (b, name)) in leaves.iter().zip(names) {
        out.entry(*b).or_insert_with(|| Bound { ids: HashMap::new(), trainable: true }).ids.insert(name.clone(), id);
    }
    out
}

fn paths(r: &mut Runner) -> Result<()> {
    use Tier::Path as T;
    let mut rng = ChaCha8Rng::seed_from_u64(13);

    let m = build_models(&small_net(8, 3), 1)?;
    let (inputs, names) = path_inputs(&m, &[BlockId::EH, BlockId::DReid], uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng));
    r.run("path_encode_reid", T, &inputs, Some(5), Box::new(|g, p| {
        let b = rebind(&p[1..], &names);
        let mut ctx = Ctx::new(&m, Mode::Train);
        let f = encode(g, &mut ctx, BlockId::EH, &b[&BlockId::EH], p[0], "check")?;
        let out = reid_head(g, &mut ctx, &b[&BlockId::DReid], f)?;
        let e = weighted(g, out.embedding, 7)?;
        let l = weighted(g, out.logits.expect("classes configured"), 8)?;
        g.add(e, l)
    }))?;

    let m = build_models(&small_net(16, 2), 3)?;
    let (inputs, names) = path_inputs(&m, &[BlockId::EC, BlockId::DH], uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng));
    r.run("path_encode_decode", T, &inputs, Some(5), Box::new(|g, p| {
        let b = rebind(&p[1..], &names);
        let mut ctx = Ctx::new(&m, Mode::Train);
        let f = encode(g, &mut ctx, BlockId::EC, &b[&BlockId::EC], p[0], "check")?;
        let y = decode_image(g, &mut ctx, BlockId::DH, &b[&BlockId::DH], f)?;
        weighted(g, y, 9)
    }))?;

    let (inputs, names) = path_inputs(&m, &[BlockId::DiscH], uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng));
    r.run("path_discriminate", T, &inputs, Some(8), Box::new(|g, p| {
        let b = rebind(&p[1..], &names);
        let ctx = Ctx::new(&m, Mode::Train);
        let y = discriminate(g, &ctx, BlockId::DiscH, &b[&BlockId::DiscH], p[0])?;
        weighted(g, y, 10)
    }))?;

    // Whole unsupervised stage objectives: input → rendered → cycled, both
    // embeddings, the frozen discriminator, and the weighted loss sum. The
    // colinearity airlight is an estimate treated as a constant of the step,
    // so it is frozen at the unperturbed point.
    let m = build_models(&small_net(8, 3), 5)?;
    let dc = DarkChannelConfig::default();
    let gen = [BlockId::EC, BlockId::DH, BlockId::EH, BlockId::DC, BlockId::DReid];
    for (name, stage) in [("path_stage_unsup_clear", Stage::UnsupClear), ("path_stage_unsup_hazy", Stage::UnsupHazy)] {
        let (inputs, names) = path_inputs(&m, &gen, uniform(&[4, 3, 8, 8], 0.05, 0.95, &mut rng));
        let (first, second, back, disc) = match stage {
            Stage::UnsupClear => (BlockId::EC, BlockId::EH, BlockId::DH, BlockId::DiscH),
            _ => (BlockId::EH, BlockId::EC, BlockId::DC, BlockId::DiscC),
        };
        let out_dec = if back == BlockId::DH { BlockId::DC } else { BlockId::DH };
        let m = &m;
        let forward = move |g: &mut Graph, p: &[NodeId], airlights: Option<&[[f64; 3]]>| -> Result<(NodeId, NodeId)> {
            let b = rebind(&p[1..], &names);
            let mut ctx = Ctx::new(m, Mode::Train);
            let f_in = encode(g, &mut ctx, first, &b[&first], p[0], "check")?;
            let rendered = decode_image(g, &mut ctx, back, &b[&back], f_in)?;
            let f_r = encode(g, &mut ctx, second, &b[&second], rendered, "check")?;
            let cycled = decode_image(g, &mut ctx, out_dec, &b[&out_dec], f_r)?;
            let e_in = reid_head(g, &mut ctx, &b[&BlockId::DReid], f_in)?.embedding;
            let e_r = reid_head(g, &mut ctx, &b[&BlockId::DReid], f_r)?.embedding;
            let frozen = bind(g, m.block(disc), false);
            let p_fake = discriminate(g, &ctx, disc, &frozen, rendered)?;
            let cycle = CycleState { input: p[0], rendered, cycled };
            let parts = match stage {
                Stage::UnsupClear => clear_stage_parts_with_airlight(g, &cycle, e_in, e_r, p_fake, &dc, airlights)?.0,
                _ => hazy_stage_parts(g, &cycle, e_in, e_r, p_fake, &dc)?,
            };
            Ok((loss::compose_stage_loss(g, stage, &parts, &LossWeights::default())?, rendered))
        };
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let (_, rendered) = forward(&mut g, &leaves, None)?;
        let rendered = g.value(rendered);
        let airlights = (0..rendered.shape()[0])
            .map(|i| estimate_airlight(&rendered.slice_outer(i), &dc))
            .collect::<Result<Vec<_>>>()?;
        r.run(name, T, &inputs, Some(3), Box::new(move |g, p| Ok(forward(g, p, Some(&airlights))?.0)))?;
    }

    // Supervised objective over a paired hazy/clear batch of two identities.
    let hazy = uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng);
    let clear = uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng);
    let (inputs, names) = path_inputs(&m, &gen, hazy);
    let labels = [0u64, 0, 1, 1];
    r.run("path_stage_supervised", T, &inputs, Some(3), Box::new(|g, p| {
        let b = rebind(&p[1..], &names);
        let mut ctx = Ctx::new(&m, Mode::Train);
        let clear = g.constant(clear.clone());
        let fh = encode(g, &mut ctx, BlockId::EH, &b[&BlockId::EH], p[0], "check")?;
        let fc = encode(g, &mut ctx, BlockId::EC, &b[&BlockId::EC], clear, "check")?;
        let dehazed = decode_image(g, &mut ctx, BlockId::DC, &b[&BlockId::DC], fh)?;
        let hazed = decode_image(g, &mut ctx, BlockId::DH, &b[&BlockId::DH], fc)?;
        let d1 = loss::l_domain_transform(g, dehazed, clear)?;
        let d2 = loss::l_domain_transform(g, hazed, p[0])?;
        let oh = reid_head(g, &mut ctx, &b[&BlockId::DReid], fh)?;
        let oc = reid_head(g, &mut ctx, &b[&BlockId::DReid], fc)?;
        let emb = g.concat(oh.embedding, oc.embedding, 0)?;
        let logits = g.concat(oh.logits.expect("classes"), oc.logits.expect("classes"), 0)?;
        let all: Vec<u64> = labels.iter().chain(&labels).copied().collect();
        let classes: Vec<usize> = all.iter().map(|&l| l as usize).collect();
        let mut parts = std::collections::BTreeMap::new();
        parts.insert(loss::LossKind::Dts, g.add(d1, d2)?);
        parts.insert(loss::LossKind::Tri, loss::l_triplet_batch_hard(g, emb, &all, &TripletConfig::default())?);
        parts.insert(loss::LossKind::Id, loss::l_id_cross_entropy(g, logits, &classes)?);
        loss::compose_stage_loss(g, Stage::Supervised, &parts, &LossWeights::default())
    }))?;
    Ok(())
}

/// Runs the suite. Cases that error abort it; cases that exceed their
/// tolerance are reported, not raised.
pub fn gradient_suite() -> Result<Vec<SuiteCase>> {
    let mut r = Runner { cases: Vec::new() };
    primitives(&mut r)?;
    losses(&mut r)?;
    paths(&mut r)?;
    Ok(r.cases)
}
