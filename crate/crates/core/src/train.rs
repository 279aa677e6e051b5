//! The semi-supervised schedule: a supervised synthetic stage, an
//! unsupervised real-clear stage and an unsupervised real-hazy stage, run
//! round-robin once per iteration.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{augment, stack_batch, Augment, Dataset, Domain, PkSampler, Record, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::haze::DarkChannelConfig;
use crate::loss::{self, LossKind, LossWeights, Stage, TripletConfig};
use crate::net::{bind, decode_image, discriminate, encode, reid_head, BlockId, Bound, Ctx, Mode, ModuleSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Which stages run each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub supervised: bool,
    pub real_clear: bool,
    pub real_hazy: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles { supervised: true, real_clear: true, real_hazy: true }
    }
}

impl StageToggles {
    pub fn any_real(&self) -> bool {
        self.real_clear || self.real_hazy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to one pass over the supervised pool per epoch.
    pub iters_per_epoch: Option<usize>,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub decay: f64,
    pub decay_interval: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub margin: f64,
    pub weights: LossWeights,
    /// Adds the triplet and ID losses with real identities to the real stages.
    pub f_variant: bool,
    pub stages: StageToggles,
    pub augment: Augment,
    pub dark_channel_patch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            iters_per_epoch: None,
            p: 4,
            k: 4,
            lr_init: 1.09e-5,
            lr_peak: 1e-4,
            warmup_epochs: 10,
            decay: 0.6,
            decay_interval: 10,
            adam: AdamConfig::default(),
            seed: 0,
            margin: 0.3,
            weights: LossWeights::default(),
            f_variant: false,
            stages: StageToggles::default(),
            augment: Augment::default(),
            dark_channel_patch: 5,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> std::result::Result<(), (String, String)> {
        let err = |k: &str, r: String| Err((k.to_string(), r));
        if self.p < 2 || self.k < 2 {
            return err("p", format!("batch needs p ≥ 2 and k ≥ 2, got {}×{}", self.p, self.k));
        }
        if self.epochs == 0 {
            return err("epochs", "must be positive".into());
        }
        if self.iters_per_epoch == Some(0) {
            return err("iters_per_epoch", "must be positive when set".into());
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return err("margin", format!("must be positive, got {}", self.margin));
        }
        for (k, v) in [("lr_init", self.lr_init), ("lr_peak", self.lr_peak)] {
            if !(v > 0.0 && v.is_finite()) {
                return err(k, format!("must be positive, got {v}"));
            }
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return err("decay", format!("must be in (0, 1], got {}", self.decay));
        }
        if self.decay_interval == 0 {
            return err("decay_interval", "must be positive".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return err("adam", "betas must be in [0, 1) and eps positive".into());
        }
        if DarkChannelConfig::new(self.dark_channel_patch).is_err() {
            return err("dark_channel_patch", format!("must be odd and positive, got {}", self.dark_channel_patch));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return err("augment.flip_prob", format!("must be in [0, 1], got {}", self.augment.flip_prob));
        }
        if !self.stages.supervised && !self.stages.any_real() {
            return err("stages", "at least one stage must be enabled".into());
        }
        if self.f_variant && !self.stages.any_real() {
            return err("f_variant", "needs a real stage".into());
        }
        self.weights.check().map_err(|(k, r)| (format!("weights.{k}"), r))
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(k, reason)| Error::Config { path: format!("train.{k}"), reason })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    fn dark_channel(&self) -> DarkChannelConfig {
        DarkChannelConfig { patch: self.dark_channel_patch }
    }
}

/// Linear warm-up from `lr_init` to `lr_peak`, then step decay by `decay`
/// every `decay_interval` epochs.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let f = epoch as f64 / cfg.warmup_epochs as f64;
        cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * f
    } else {
        let steps = (epoch - cfg.warmup_epochs) / cfg.decay_interval;
        cfg.lr_peak * cfg.decay.powi(steps as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with bias correction; state is kept per named tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, state: BTreeMap::new() }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam", format!("`{name}`: {:?} vs {:?}", param.shape(), grad.shape())));
        }
        let n = param.numel();
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
        st.t += 1;
        let AdamConfig { beta1: b1, beta2: b2, eps } = self.cfg;
        let c1 = 1.0 - b1.powi(st.t);
        let c2 = 1.0 - b2.powi(st.t);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut st.m).zip(&mut st.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        Ok(())
    }

    /// Number of updates applied to `name`.
    pub fn steps(&self, name: &str) -> usize {
        self.state.get(name).map_or(0, |s| s.t as usize)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: usize,
    pub stage: Stage,
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dm_fraction: Option<f64>,
    /// Encoder routing tags recorded while building the step's graph.
    #[serde(skip)]
    pub routing: Vec<String>,
}

/// The three images of one translation cycle.
#[derive(Clone, Copy, Debug)]
pub struct CycleState {
    pub input: NodeId,
    /// Output of the first decoder (`K^R'`).
    pub rendered: NodeId,
    /// Input translated there and back (`K^R''`).
    pub cycled: NodeId,
}

/// Loss terms of the real-clear stage, without the optional ID terms.
pub fn clear_stage_parts(
    g: &mut Graph,
    cycle: &CycleState,
    emb_input: NodeId,
    emb_rendered: NodeId,
    p_fake: NodeId,
    dc: &DarkChannelConfig,
) -> Result<(BTreeMap<LossKind, NodeId>, f64)> {
    clear_stage_parts_with_airlight(g, cycle, emb_input, emb_rendered, p_fake, dc, None)
}

/// [`clear_stage_parts`] with the colinearity airlights supplied instead of
/// estimated from the rendered images.
pub fn clear_stage_parts_with_airlight(
    g: &mut Graph,
    cycle: &CycleState,
    emb_input: NodeId,
    emb_rendered: NodeId,
    p_fake: NodeId,
    dc: &DarkChannelConfig,
    airlights: Option<&[[f64; 3]]>,
) -> Result<(BTreeMap<LossKind, NodeId>, f64)> {
    let mut parts = BTreeMap::new();
    parts.insert(LossKind::Rc, loss::l_render_consistency(g, cycle.input, cycle.cycled)?);
    let midc = loss::l_midc(g, cycle.input, cycle.rendered, dc)?;
    parts.insert(LossKind::Midc, midc.loss);
    let cr = match airlights {
        Some(a) => loss::l_colinear_with_airlight(g, cycle.input, cycle.rendered, a)?,
        None => loss::l_colinear(g, cycle.input, cycle.rendered, dc)?,
    };
    parts.insert(LossKind::Cr, cr);
    parts.insert(LossKind::Dis, loss::g_loss(g, p_fake)?);
    parts.insert(LossKind::Ec, loss::l_embedding_consistency(g, emb_input, emb_rendered)?);
    Ok((parts, midc.mask_fraction))
}

/// Loss terms of the real-hazy stage, without the optional ID terms.
pub fn hazy_stage_parts(
    g: &mut Graph,
    cycle: &CycleState,
    emb_input: NodeId,
    emb_rendered: NodeId,
    p_fake: NodeId,
    dc: &DarkChannelConfig,
) -> Result<BTreeMap<LossKind, NodeId>> {
    let mut parts = BTreeMap::new();
    parts.insert(LossKind::Rc, loss::l_render_consistency(g, cycle.input, cycle.cycled)?);
    parts.insert(LossKind::Dis, loss::g_loss(g, p_fake)?);
    parts.insert(LossKind::Dc, loss::l_dark_channel(g, cycle.rendered, dc)?);
    parts.insert(LossKind::Tv, loss::l_total_variation(g, cycle.rendered)?);
    parts.insert(LossKind::Ec, loss::l_embedding_consistency(g, emb_input, emb_rendered)?);
    Ok(parts)
}

/// Identity → class index: synthetic training identities first, then real
/// training identities when `with_real`.
pub fn label_map(data: &Dataset, with_real: bool) -> BTreeMap<u64, usize> {
    let mut syn = std::collections::BTreeSet::new();
    let mut real = std::collections::BTreeSet::new();
    for s in data.samples.iter().filter(|s| s.split == Split::Train) {
        if s.domain.is_real() {
            real.insert(s.identity);
        } else {
            syn.insert(s.identity);
        }
    }
    let mut ids: Vec<u64> = syn.into_iter().collect();
    if with_real {
        ids.extend(real);
    }
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// Classifier width needed to train `cfg` on `data`.
pub fn num_classes(data: &Dataset, cfg: &TrainConfig) -> usize {
    label_map(data, cfg.f_variant).len()
}

/// Records a training run needs: the synthetic training split, plus the
/// real training split when a real stage is enabled.
pub fn training_records(stages: &StageToggles) -> impl Fn(&Record) -> bool + Sync {
    let real = stages.any_real();
    move |r: &Record| r.split == Split::Train && (real || !r.domain.is_real())
}

const GENERATOR: [BlockId; 5] = [BlockId::EH, BlockId::EC, BlockId::DH, BlockId::DC, BlockId::DReid];

struct Bindings {
    blocks: BTreeMap<BlockId, Bound>,
}

impl Bindings {
    fn generator(g: &mut Graph, models: &ModuleSet) -> Self {
        let blocks = GENERATOR.iter().map(|&b| (b, bind(g, models.block(b), true))).collect();
        Bindings { blocks }
    }

    fn get(&self, b: BlockId) -> &Bound {
        &self.blocks[&b]
    }
}

/// Batch sampling and augmentation stream of one stage, independent of
/// which other stages run.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(match stage {
        Stage::Supervised => 1,
        Stage::UnsupClear => 2,
        Stage::UnsupHazy => 3,
    });
    r
}

/// Per-stage step counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitSummary {
    pub iterations: usize,
    pub supervised_steps: usize,
    pub clear_steps: usize,
    pub hazy_steps: usize,
    pub discriminator_steps: usize,
}

/// Optimizer state and data pools for one training run.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    data: &'d Dataset,
    labels: BTreeMap<u64, usize>,
    pub generator_opt: Adam,
    pub discriminator_opt: Adam,
    /// Real examples for the hazy discriminator: synthetic and real hazy.
    hazy_pool: Vec<usize>,
    /// Real examples for the clear discriminator: synthetic and real clear.
    clear_pool: Vec<usize>,
}

impl<'d> Trainer<'d> {
    pub fn new(models: &ModuleSet, data: &'d Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let labels = label_map(data, cfg.f_variant);
        if models.cfg.num_classes != Some(labels.len()) {
            return Err(Error::Config {
                path: "net.num_classes".into(),
                reason: format!("model has {:?} classes, training data has {}", models.cfg.num_classes, labels.len()),
            });
        }
        let pool = |a: Domain, b: Domain| {
            let mut v = data.indices(a, Split::Train);
            v.extend(data.indices(b, Split::Train));
            v
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            labels,
            generator_opt: Adam::new(cfg.adam),
            discriminator_opt: Adam::new(cfg.adam),
            hazy_pool: pool(Domain::SynHazy, Domain::RealHazy),
            clear_pool: pool(Domain::SynClear, Domain::RealClear),
        })
    }

    fn label(&self, i: usize) -> Result<usize> {
        let id = self.data.samples[i].identity;
        self.labels
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("identity {id} has no class label")))
    }

    fn images(&self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let imgs: Vec<Tensor> = batch
            .iter()
            .map(|&i| augment(&[&self.data.samples[i].image], &self.cfg.augment, rng).remove(0))
            .collect();
        stack_batch(&imgs)
    }

    /// Triplet and ID losses over the concatenation of both embedding
    /// streams, each labelled with `labels`.
    fn reid_parts(
        &self,
        g: &mut Graph,
        a: &crate::net::ReidOutput,
        b: &crate::net::ReidOutput,
        labels: &[usize],
        parts: &mut BTreeMap<LossKind, NodeId>,
    ) -> Result<()> {
        let emb = g.concat(a.embedding, b.embedding, 0)?;
        let (la, lb) = match (a.logits, b.logits) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::invalid("classifier logits missing")),
        };
        let logits = g.concat(la, lb, 0)?;
        let both: Vec<usize> = labels.iter().chain(labels).copied().collect();
        let ids: Vec<u64> = both.iter().map(|&l| l as u64).collect();
        parts.insert(
            LossKind::Tri,
            loss::l_triplet_batch_hard(g, emb, &ids, &TripletConfig { margin: self.cfg.margin })?,
        );
        parts.insert(LossKind::Id, loss::l_id_cross_entropy(g, logits, &both)?);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_generator(
        &mut self,
        g: Graph,
        binds: &Bindings,
        bn_updates: Vec<crate::net::BnUpdate>,
        parts: BTreeMap<LossKind, NodeId>,
        stage: Stage,
        models: &mut ModuleSet,
        iter: usize,
        lr: f64,
    ) -> Result<StepLog> {
        let mut g = g;
        let total = loss::compose_stage_loss_with(&mut g, stage, &parts, &self.cfg.weights, self.cfg.f_variant && stage != Stage::Supervised)?;
        if let Some((node, kind)) = g.first_non_finite() {
            return Err(Error::NonFinite { node: node.0, kind: kind.name() });
        }
        let grads = g.backward(total)?;
        let mut updates = Vec::new();
        for (_, b) in &binds.blocks {
            for (name, &id) in &b.ids {
                let shape = g.shape(id).to_vec();
                updates.push((name.clone(), grads.get_or_zeros(id, &shape)));
            }
        }
        updates.sort_by(|a, b| a.0.cmp(&b.0));
        let sq: f64 = updates.iter().map(|(_, gr)| gr.data().iter().map(|v| v * v).sum::<f64>()).sum();
        for (name, gr) in &updates {
            let p = models.find_mut(name).ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
            self.generator_opt.step(name, p, gr, lr)?;
        }
        Ctx::apply_bn_updates(&bn_updates, &g, models)?;
        let mut losses: BTreeMap<String, f64> =
            parts.iter().map(|(k, &n)| (k.name().to_string(), g.value(n).item())).collect();
        losses.insert("total".into(), g.value(total).item());
        Ok(StepLog {
            iter,
            stage,
            losses,
            lr,
            grad_norm: sq.sqrt(),
            dm_fraction: None,
            routing: g.trace().to_vec(),
        })
    }

    /// One update of discriminator `disc` on `real` versus `fake` images.
    /// Returns the discriminator loss.
    pub fn discriminator_step(&mut self, models: &mut ModuleSet, disc: BlockId, real: Tensor, fake: Tensor, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let b = bind(&mut g, models.block(disc), true);
        let (d, grads) = {
            let ctx = Ctx::new(models, Mode::Train);
            let r = g.constant(real);
            let f = g.constant(fake);
            let pr = discriminate(&mut g, &ctx, disc, &b, r)?;
            let pf = discriminate(&mut g, &ctx, disc, &b, f)?;
            let d = loss::d_loss(&mut g, pr, pf)?;
            if let Some((node, kind)) = g.first_non_finite() {
                return Err(Error::NonFinite { node: node.0, kind: kind.name() });
            }
            (g.value(d).item(), g.backward(d)?)
        };
        let mut names: Vec<(&String, &NodeId)> = b.ids.iter().collect();
        names.sort();
        for (name, &id) in names {
            let gr = grads.get_or_zeros(id, g.shape(id));
            let p = models.find_mut(name).ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
            self.discriminator_opt.step(name, p, &gr, lr)?;
        }
        Ok(d)
    }

    fn pool_batch(&self, pool: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if pool.is_empty() {
            return Err(Error::invalid("discriminator pool is empty"));
        }
        let picks: Vec<usize> = (0..self.cfg.batch_size()).map(|_| *pool.choose(rng).expect("non-empty")).collect();
        self.images(&picks, rng)
    }

    /// Paired synthetic step: both translation directions against ground
    /// truth, and the triplet/ID losses over hazy and clear embeddings.
    pub fn supervised_step(&mut self, models: &mut ModuleSet, batch: &[usize], iter: usize, lr: f64, rng: &mut ChaCha8Rng) -> Result<StepLog> {
        let mut hazy = Vec::with_capacity(batch.len());
        let mut clear = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &self.data.samples[i];
            if s.domain != Domain::SynHazy {
                return Err(Error::invalid(format!("supervised batch holds a {} sample", s.domain.as_str())));
            }
            let pair = s.pair.as_ref().ok_or_else(|| Error::invalid(format!("sample {i} has no clear pair")))?;
            labels.push(self.label(i)?);
            let mut a = augment(&[&s.image, pair], &self.cfg.augment, rng);
            clear.push(a.pop().expect("two images"));
            hazy.push(a.pop().expect("two images"));
        }
        let mut g = Graph::new();
        let xh = g.constant(stack_batch(&hazy)?);
        let xc = g.constant(stack_batch(&clear)?);
        let binds = Bindings::generator(&mut g, models);
        let (parts, updates) = {
            let mut ctx = Ctx::new(models, Mode::Train);
            let fh = encode(&mut g, &mut ctx, BlockId::EH, binds.get(BlockId::EH), xh, "syn_hazy")?;
            let fc = encode(&mut g, &mut ctx, BlockId::EC, binds.get(BlockId::EC), xc, "syn_clear")?;
            let to_clear = decode_image(&mut g, &mut ctx, BlockId::DC, binds.get(BlockId::DC), fh)?;
            let to_hazy = decode_image(&mut g, &mut ctx, BlockId::DH, binds.get(BlockId::DH), fc)?;
            let a = loss::l_domain_transform(&mut g, to_clear, xc)?;
            let b = loss::l_domain_transform(&mut g, to_hazy, xh)?;
            let mut parts = BTreeMap::new();
            parts.insert(LossKind::Dts, g.add(a, b)?);
            let rh = reid_head(&mut g, &mut ctx, binds.get(BlockId::DReid), fh)?;
            let rc = reid_head(&mut g, &mut ctx, binds.get(BlockId::DReid), fc)?;
            self.reid_parts(&mut g, &rh, &rc, &labels, &mut parts)?;
            (parts, ctx.bn_updates)
        };
        self.finish_generator(g, &binds, updates, parts, Stage::Supervised, models, iter, lr)
    }

    /// Real-clear step: clear → hazy → clear cycle with the hazy
    /// discriminator, followed by one update of that discriminator.
    pub fn unsupervised_clear_step(&mut self, models: &mut ModuleSet, batch: &[usize], iter: usize, lr: f64, rng: &mut ChaCha8Rng) -> Result<StepLog> {
        self.unsupervised_step(models, batch, iter, lr, rng, Stage::UnsupClear)
    }

    /// Real-hazy step: hazy → clear → hazy cycle with the clear
    /// discriminator, followed by one update of that discriminator.
    pub fn unsupervised_hazy_step(&mut self, models: &mut ModuleSet, batch: &[usize], iter: usize, lr: f64, rng: &mut ChaCha8Rng) -> Result<StepLog> {
        self.unsupervised_step(models, batch, iter, lr, rng, Stage::UnsupHazy)
    }

    fn unsupervised_step(
        &mut self,
        models: &mut ModuleSet,
        batch: &[usize],
        iter: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
        stage: Stage,
    ) -> Result<StepLog> {
        let clear_stage = stage == Stage::UnsupClear;
        let (want, first_enc, first_dec, second_enc, second_dec, disc, tags) = if clear_stage {
            (Domain::RealClear, BlockId::EC, BlockId::DH, BlockId::EH, BlockId::DC, BlockId::DiscH, ["real_clear", "rendered_hazy"])
        } else {
            (Domain::RealHazy, BlockId::EH, BlockId::DC, BlockId::EC, BlockId::DH, BlockId::DiscC, ["real_hazy", "rendered_clear"])
        };
        if let Some(&i) = batch.iter().find(|&&i| self.data.samples[i].domain != want) {
            return Err(Error::invalid(format!(
                "{} batch holds a {} sample",
                stage.name(),
                self.data.samples[i].domain.as_str()
            )));
        }
        let labels = if self.cfg.f_variant {
            batch.iter().map(|&i| self.label(i)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let x = self.images(batch, rng)?;
        let dc = self.cfg.dark_channel();
        let mut g = Graph::new();
        let x = g.constant(x);
        let binds = Bindings::generator(&mut g, models);
        let frozen = bind(&mut g, models.block(disc), false);
        let (parts, updates, dm_fraction, rendered) = {
            let mut ctx = Ctx::new(models, Mode::Train);
            let f1 = encode(&mut g, &mut ctx, first_enc, binds.get(first_enc), x, tags[0])?;
            let rendered = decode_image(&mut g, &mut ctx, first_dec, binds.get(first_dec), f1)?;
            let f2 = encode(&mut g, &mut ctx, second_enc, binds.get(second_enc), rendered, tags[1])?;
            let cycled = decode_image(&mut g, &mut ctx, second_dec, binds.get(second_dec), f2)?;
            let r1 = reid_head(&mut g, &mut ctx, binds.get(BlockId::DReid), f1)?;
            let r2 = reid_head(&mut g, &mut ctx, binds.get(BlockId::DReid), f2)?;
            let p_fake = discriminate(&mut g, &ctx, disc, &frozen, rendered)?;
            let cycle = CycleState { input: x, rendered, cycled };
            // The clear-side embedding is the consistency target: the real
            // clear input in this stage, the rendered clear image in the other.
            let (e_in, e_r) = if clear_stage {
                (g.stop_gradient(r1.embedding)?, r2.embedding)
            } else {
                (r1.embedding, g.stop_gradient(r2.embedding)?)
            };
            let (mut parts, dm) = if clear_stage {
                let (p, dm) = clear_stage_parts(&mut g, &cycle, e_in, e_r, p_fake, &dc)?;
                (p, Some(dm))
            } else {
                (hazy_stage_parts(&mut g, &cycle, e_in, e_r, p_fake, &dc)?, None)
            };
            if self.cfg.f_variant {
                self.reid_parts(&mut g, &r1, &r2, &labels, &mut parts)?;
            }
            (parts, ctx.bn_updates, dm, rendered)
        };
        let fake = g.value(rendered).clone();
        let mut log = self.finish_generator(g, &binds, updates, parts, stage, models, iter, lr)?;
        log.dm_fraction = dm_fraction;
        let pool = if clear_stage { &self.hazy_pool } else { &self.clear_pool };
        let real = self.pool_batch(&pool.clone(), rng)?;
        let d = self.discriminator_step(models, disc, real, fake, lr)?;
        log.losses.insert("d".into(), d);
        Ok(log)
    }
}

/// Trains `models` on `data`, calling `on_step` after every stage step.
/// The result is a pure function of the models, data and config.
pub fn fit(models: &mut ModuleSet, data: &Dataset, cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<FitSummary> {
    let mut tr = Trainer::new(models, data, cfg)?;
    let sampler = |domain: Domain, what: &str| -> Result<PkSampler> {
        let pool = data.indices(domain, Split::Train);
        if pool.is_empty() {
            return Err(Error::invalid(format!("no {what} training images")));
        }
        PkSampler::new(&data.samples, &pool)
    };
    let st = cfg.stages;
    let sup = if st.supervised { Some(sampler(Domain::SynHazy, "synthetic hazy")?) } else { None };
    let clear = if st.real_clear { Some(sampler(Domain::RealClear, "real clear")?) } else { None };
    let hazy = if st.real_hazy { Some(sampler(Domain::RealHazy, "real hazy")?) } else { None };
    let pool_len = |d: Domain| data.indices(d, Split::Train).len();
    let per_epoch = cfg.iters_per_epoch.unwrap_or_else(|| {
        let n = if st.supervised {
            pool_len(Domain::SynHazy)
        } else {
            pool_len(Domain::RealClear).max(pool_len(Domain::RealHazy))
        };
        n.div_ceil(cfg.batch_size()).max(1)
    });
    let mut rngs = [Stage::Supervised, Stage::UnsupClear, Stage::UnsupHazy].map(|s| stage_rng(cfg.seed, s));
    let mut summary = FitSummary::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        for _ in 0..per_epoch {
            let iter = summary.iterations;
            if let Some(s) = &sup {
                let b = s.sample(cfg.p, cfg.k, &mut rngs[0]);
                on_step(&tr.supervised_step(models, &b, iter, lr, &mut rngs[0])?)?;
                summary.supervised_steps += 1;
            }
            if let Some(s) = &clear {
                let b = s.sample(cfg.p, cfg.k, &mut rngs[1]);
                on_step(&tr.unsupervised_clear_step(models, &b, iter, lr, &mut rngs[1])?)?;
                summary.clear_steps += 1;
                summary.discriminator_steps += 1;
            }
            if let Some(s) = &hazy {
                let b = s.sample(cfg.p, cfg.k, &mut rngs[2]);
                on_step(&tr.unsupervised_hazy_step(models, &b, iter, lr, &mut rngs[2])?)?;
                summary.hazy_steps += 1;
                summary.discriminator_steps += 1;
            }
            summary.iterations += 1;
        }
    }
    Ok(summary)
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

/// [`fit`] writing the JSON-lines log and the final checkpoint into `out`.
pub fn fit_to_dir(models: &mut ModuleSet, data: &Dataset, cfg: &TrainConfig, out: &Path) -> Result<FitSummary> {
    std::fs::create_dir_all(out)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join(LOG_FILE))?);
    let summary = fit(models, data, cfg, |s| {
        serde_json::to_writer(&mut log, s)?;
        log.write_all(b"\n")?;
        Ok(())
    })?;
    log.flush()?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), models)?;
    Ok(summary)
}
