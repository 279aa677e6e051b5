//! Training objectives as scalar graph nodes.
//!
//! Image batches are `N×3×H×W` nodes, embeddings `N×D`, logits `N×C`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::haze::{self, DarkChannelConfig};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;
const DEGENERATE_NORM: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_dts: f64,
    pub w_rc: f64,
    pub w_midc: f64,
    pub w_cr: f64,
    pub w_dis: f64,
    pub w_dc: f64,
    pub w_tv: f64,
    pub w_tri: f64,
    pub w_id: f64,
    pub w_ec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_dts: 1.0,
            w_rc: 1.0,
            w_midc: 1.0,
            w_cr: 1.0,
            w_dis: 1.0,
            w_dc: 1.0,
            w_tv: 1.0,
            w_tri: 1.0,
            w_id: 1.0,
            w_ec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn weight(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Dts => self.w_dts,
            LossKind::Rc => self.w_rc,
            LossKind::Midc => self.w_midc,
            LossKind::Cr => self.w_cr,
            LossKind::Dis => self.w_dis,
            LossKind::Dc => self.w_dc,
            LossKind::Tv => self.w_tv,
            LossKind::Tri => self.w_tri,
            LossKind::Id => self.w_id,
            LossKind::Ec => self.w_ec,
        }
    }

    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        for kind in LossKind::ALL {
            let w = self.weight(kind);
            if !(w >= 0.0 && w.is_finite()) {
                return Err((kind.weight_key(), format!("must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossKind {
    Dts,
    Rc,
    Midc,
    Cr,
    /// Generator side of the discriminative loss.
    Dis,
    Dc,
    Tv,
    Tri,
    Id,
    Ec,
}

impl LossKind {
    pub const ALL: [LossKind; 10] = [
        LossKind::Dts,
        LossKind::Rc,
        LossKind::Midc,
        LossKind::Cr,
        LossKind::Dis,
        LossKind::Dc,
        LossKind::Tv,
        LossKind::Tri,
        LossKind::Id,
        LossKind::Ec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dts => "dts",
            LossKind::Rc => "rc",
            LossKind::Midc => "midc",
            LossKind::Cr => "cr",
            LossKind::Dis => "g",
            LossKind::Dc => "dc",
            LossKind::Tv => "tv",
            LossKind::Tri => "tri",
            LossKind::Id => "id",
            LossKind::Ec => "ec",
        }
    }

    fn weight_key(self) -> &'static str {
        match self {
            LossKind::Dts => "w_dts",
            LossKind::Rc => "w_rc",
            LossKind::Midc => "w_midc",
            LossKind::Cr => "w_cr",
            LossKind::Dis => "w_dis",
            LossKind::Dc => "w_dc",
            LossKind::Tv => "w_tv",
            LossKind::Tri => "w_tri",
            LossKind::Id => "w_id",
            LossKind::Ec => "w_ec",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Supervised,
    UnsupClear,
    UnsupHazy,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Supervised => "supervised",
            Stage::UnsupClear => "unsup_clear",
            Stage::UnsupHazy => "unsup_hazy",
        }
    }
}

/// Loss terms a stage must supply; `reid_supervision` adds the triplet and
/// ID terms to the unsupervised stages.
pub fn required_parts(stage: Stage, reid_supervision: bool) -> BTreeSet<LossKind> {
    use LossKind::*;
    let mut s: BTreeSet<LossKind> = match stage {
        Stage::Supervised => [Dts, Tri, Id].into(),
        Stage::UnsupClear => [Rc, Midc, Cr, Dis, Ec].into(),
        Stage::UnsupHazy => [Rc, Dis, Dc, Tv, Ec].into(),
    };
    if reid_supervision {
        s.extend([Tri, Id]);
    }
    s
}

/// Weighted sum of a stage's loss terms. Rejects missing or extra terms.
pub fn compose_stage_loss(g: &mut Graph, stage: Stage, parts: &BTreeMap<LossKind, NodeId>, w: &LossWeights) -> Result<NodeId> {
    compose_stage_loss_with(g, stage, parts, w, false)
}

pub fn compose_stage_loss_with(
    g: &mut Graph,
    stage: Stage,
    parts: &BTreeMap<LossKind, NodeId>,
    w: &LossWeights,
    reid_supervision: bool,
) -> Result<NodeId> {
    let need = required_parts(stage, reid_supervision);
    let have: BTreeSet<LossKind> = parts.keys().copied().collect();
    if need != have {
        let missing: Vec<_> = need.difference(&have).map(|k| k.name()).collect();
        let extra: Vec<_> = have.difference(&need).map(|k| k.name()).collect();
        return Err(Error::Protocol(format!(
            "{} stage loss terms mismatch: missing {missing:?}, unexpected {extra:?}",
            stage.name()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&kind, &node) in parts {
        if g.value(node).numel() != 1 {
            return Err(Error::shape("compose_stage_loss", format!("{} term is not scalar", kind.name())));
        }
        let term = g.mul_scalar(node, w.weight(kind))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("every stage has terms"))
}

fn same_shape(g: &Graph, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

fn l1(g: &mut Graph, a: NodeId, b: NodeId, op: &'static str) -> Result<NodeId> {
    same_shape(g, a, b, op)?;
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Mean absolute error (equal-size images, so the batch mean of per-image
/// means).
pub fn l_domain_transform(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    l1(g, pred, target, "l_domain_transform")
}

pub fn l_render_consistency(g: &mut Graph, input: NodeId, cycled: NodeId) -> Result<NodeId> {
    l1(g, input, cycled, "l_render_consistency")
}

pub fn l_embedding_consistency(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    l1(g, a, b, "l_embedding_consistency")
}

pub struct Midc {
    pub loss: NodeId,
    /// Fraction of pixels where the rendered hazy dark channel falls below
    /// the clear one.
    pub mask_fraction: f64,
}

/// Penalizes pixels where rendering haze lowered the dark channel:
/// `mean(DM · |DC(hazy) − DC(clear)|)` with `DM = [DC(hazy) < DC(clear)]`,
/// written as `mean(relu(DC(clear) − DC(hazy)))`, which has the same value
/// and gradient while the mask stays constant.
pub fn l_midc(g: &mut Graph, clear: NodeId, hazy: NodeId, cfg: &DarkChannelConfig) -> Result<Midc> {
    same_shape(g, clear, hazy, "l_midc")?;
    let dc_c = g.min_reduce(clear, cfg.patch)?;
    let dc_h = g.min_reduce(hazy, cfg.patch)?;
    let diff = g.sub(dc_c, dc_h)?;
    let mask_fraction = {
        let d = g.value(diff).data();
        d.iter().filter(|&&v| v > 0.0).count() as f64 / d.len() as f64
    };
    let r = g.relu(diff)?;
    Ok(Midc { loss: g.mean(r)?, mask_fraction })
}

fn nchw(g: &Graph, x: NodeId, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *g.shape(x) {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected N×C×H×W, got {s:?}"))),
    }
}

/// `1 − cos(clear − A, hazy − A)` averaged over the valid pixels of each
/// image, then over the batch. `A` is estimated per image from the hazy
/// values and carries no gradient; pixels where either offset is shorter
/// than 1e-6 are excluded.
pub fn l_colinear(g: &mut Graph, clear: NodeId, hazy: NodeId, cfg: &DarkChannelConfig) -> Result<NodeId> {
    same_shape(g, clear, hazy, "l_colinear")?;
    let (n, c, _, _) = nchw(g, clear, "l_colinear")?;
    if c != 3 {
        return Err(Error::shape("l_colinear", format!("expected 3 channels, got {c}")));
    }
    let airlights = (0..n)
        .map(|i| haze::estimate_airlight(&g.value(hazy).slice_outer(i), cfg))
        .collect::<Result<Vec<_>>>()?;
    l_colinear_with_airlight(g, clear, hazy, &airlights)
}

/// [`l_colinear`] with caller-supplied airlights, one per image.
pub fn l_colinear_with_airlight(g: &mut Graph, clear: NodeId, hazy: NodeId, airlights: &[[f64; 3]]) -> Result<NodeId> {
    same_shape(g, clear, hazy, "l_colinear")?;
    let (n, c, h, w) = nchw(g, clear, "l_colinear")?;
    if c != 3 || airlights.len() != n {
        return Err(Error::shape("l_colinear", format!("{c} channels, {} airlights for {n} images", airlights.len())));
    }
    let hw = h * w;
    let mut a_data = Vec::with_capacity(n * 3 * hw);
    for a in airlights {
        for &ch in a {
            a_data.extend(std::iter::repeat(ch).take(hw));
        }
    }
    let a = g.constant(Tensor::new(vec![n, 3, h, w], a_data)?);
    let u = g.sub(clear, a)?;
    let v = g.sub(hazy, a)?;
    let mut weights = vec![0.0; n * hw];
    {
        let (ud, vd) = (g.value(u).data(), g.value(v).data());
        for i in 0..n {
            let valid: Vec<bool> = (0..hw)
                .map(|p| {
                    let norm = |d: &[f64]| (0..3).map(|ch| d[(i * 3 + ch) * hw + p].powi(2)).sum::<f64>().sqrt();
                    norm(ud) >= DEGENERATE_NORM && norm(vd) >= DEGENERATE_NORM
                })
                .collect();
            let count = valid.iter().filter(|&&b| b).count();
            if count > 0 {
                for p in 0..hw {
                    if valid[p] {
                        weights[i * hw + p] = 1.0 / (count as f64 * n as f64);
                    }
                }
            }
        }
    }
    let un = g.l2_normalize(u, 1)?;
    let vn = g.l2_normalize(v, 1)?;
    let prod = g.mul(un, vn)?;
    let cos = g.sum_axis(prod, 1)?;
    let neg = g.mul_scalar(cos, -1.0)?;
    let resid = g.add_scalar(neg, 1.0)?;
    let wt = g.constant(Tensor::new(vec![n, h, w], weights)?);
    let weighted = g.mul(resid, wt)?;
    g.sum(weighted)
}

fn clamp_prob(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `−mean log p_real − mean log(1 − p_fake)`.
pub fn d_loss(g: &mut Graph, p_real: NodeId, p_fake: NodeId) -> Result<NodeId> {
    let pr = clamp_prob(g, p_real)?;
    let lr = g.log(pr)?;
    let mr = g.mean(lr)?;
    let pf = clamp_prob(g, p_fake)?;
    let one_minus = g.mul_scalar(pf, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let lf = g.log(one_minus)?;
    let mf = g.mean(lf)?;
    let s = g.add(mr, mf)?;
    g.mul_scalar(s, -1.0)
}

/// Saturating generator loss `mean log(1 − p_fake)`, minimized by the
/// generator.
pub fn g_loss(g: &mut Graph, p_fake: NodeId) -> Result<NodeId> {
    let pf = clamp_prob(g, p_fake)?;
    let one_minus = g.mul_scalar(pf, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let lf = g.log(one_minus)?;
    g.mean(lf)
}

/// Both discriminative losses from one discriminator applied to real and
/// fake batches; the fake batch reaches `d_loss` through a stop-gradient.
pub fn l_discriminative<F>(g: &mut Graph, mut disc: F, real: NodeId, fake: NodeId) -> Result<(NodeId, NodeId)>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let p_real = disc(g, real)?;
    let fake_sg = g.stop_gradient(fake)?;
    let p_fake_sg = disc(g, fake_sg)?;
    let d = d_loss(g, p_real, p_fake_sg)?;
    let p_fake = disc(g, fake)?;
    let gl = g_loss(g, p_fake)?;
    Ok((d, gl))
}

pub fn l_dark_channel(g: &mut Graph, img: NodeId, cfg: &DarkChannelConfig) -> Result<NodeId> {
    let dc = g.min_reduce(img, cfg.patch)?;
    g.mean(dc)
}

/// Sum of absolute forward differences along both spatial axes over all
/// channels, divided by `C·H·W` per image and averaged over the batch.
pub fn l_total_variation(g: &mut Graph, img: NodeId) -> Result<NodeId> {
    let (n, c, h, w) = nchw(g, img, "l_total_variation")?;
    if h < 2 || w < 2 {
        return Err(Error::shape("l_total_variation", format!("spatial dims must be ≥ 2, got {h}×{w}")));
    }
    let dx = g.spatial_diff(img, 3)?;
    let dx = g.abs(dx)?;
    let sx = g.sum(dx)?;
    let dy = g.spatial_diff(img, 2)?;
    let dy = g.abs(dy)?;
    let sy = g.sum(dy)?;
    let s = g.add(sx, sy)?;
    g.mul_scalar(s, 1.0 / (n * c * h * w) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 0.3 }
    }
}

fn check_triplet_labels(labels: &[u64]) -> Result<()> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid("triplet loss needs at least two distinct labels"));
    }
    let single: Vec<u64> = counts.iter().filter(|(_, &c)| c < 2).map(|(&l, _)| l).collect();
    if !single.is_empty() {
        return Err(Error::invalid(format!("triplet loss labels with a single sample: {single:?}")));
    }
    Ok(())
}

/// Batch-hard triplet loss with Euclidean distance: for each anchor, the
/// farthest same-label sample and the nearest other-label sample (first
/// index on ties); mean hinge over all anchors.
pub fn l_triplet_batch_hard(g: &mut Graph, emb: NodeId, labels: &[u64], cfg: &TripletConfig) -> Result<NodeId> {
    let n = match *g.shape(emb) {
        [n, _] => n,
        ref s => return Err(Error::shape("l_triplet_batch_hard", format!("expected N×D, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape("l_triplet_batch_hard", format!("{n} embeddings, {} labels", labels.len())));
    }
    check_triplet_labels(labels)?;
    let dist = g.pairwise_distance(emb)?;
    let d = g.value(dist).data().to_vec();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let mut best_p: Option<usize> = None;
        let mut best_n: Option<usize> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let v = d[i * n + j];
            if labels[j] == labels[i] {
                if best_p.map_or(true, |b| v > d[i * n + b]) {
                    best_p = Some(j);
                }
            } else if best_n.map_or(true, |b| v < d[i * n + b]) {
                best_n = Some(j);
            }
        }
        pos.push(i * n + best_p.expect("checked labels"));
        neg.push(i * n + best_n.expect("checked labels"));
    }
    let dp = g.select(dist, pos)?;
    let dn = g.select(dist, neg)?;
    let diff = g.sub(dp, dn)?;
    let diff = g.add_scalar(diff, cfg.margin)?;
    let hinge = g.relu(diff)?;
    g.mean(hinge)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn l_id_cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, c) = match *g.shape(logits) {
        [n, c] => (n, c),
        ref s => return Err(Error::shape("l_id_cross_entropy", format!("expected N×C, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape("l_id_cross_entropy", format!("{n} rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.select(ls, labels.iter().enumerate().map(|(i, &y)| i * c + y).collect())?;
    let m = g.mean(picked)?;
    g.mul_scalar(m, -1.0)
}
