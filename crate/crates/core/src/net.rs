//! Dual-encoder network: hazy and clear encoders, two image decoders with a
//! skip connection, the re-identification head and two discriminators.
//!
//! The recognition backbone is a stack of `backbone_stages` conv blocks.
//! The first `encoder_blocks` stages form each encoder; the rest live in
//! the re-identification decoder, so changing the split point keeps the
//! parameter count of every recognition path fixed.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of their previous value per update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub encoder_blocks: usize,
    pub backbone_stages: usize,
    pub embedding_dim: usize,
    /// Classifier width; filled in from the training data when unset.
    pub num_classes: Option<usize>,
    pub discriminator_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            base_channels: 16,
            encoder_blocks: 2,
            backbone_stages: 4,
            embedding_dim: 64,
            num_classes: None,
            discriminator_channels: 16,
        }
    }
}

impl NetConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(1..=4).contains(&self.encoder_blocks) {
            return Err(("encoder_blocks", format!("must be in 1..=4, got {}", self.encoder_blocks)));
        }
        if self.backbone_stages < self.encoder_blocks || self.backbone_stages > 6 {
            return Err(("backbone_stages", format!("must be in encoder_blocks..=6, got {}", self.backbone_stages)));
        }
        if self.embedding_dim < 8 {
            return Err(("embedding_dim", format!("must be at least 8, got {}", self.embedding_dim)));
        }
        if self.base_channels == 0 || self.discriminator_channels == 0 {
            return Err(("base_channels", "channel counts must be positive".into()));
        }
        let div = 1usize << self.backbone_stages;
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(("image_size", format!("must be a positive multiple of 2^backbone_stages = {div}")));
        }
        if self.num_classes == Some(0) {
            return Err(("num_classes", "must be positive when set".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(k, reason)| Error::Config { path: format!("net.{k}"), reason })
    }

    /// Output width of backbone stage `i` (1-based).
    pub fn stage_width(&self, i: usize) -> usize {
        if i == self.backbone_stages {
            self.embedding_dim
        } else {
            (self.base_channels << (i - 1)).min(self.embedding_dim)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// False for batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered named tensors of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamBlock {
    pub fn new(name: &str) -> Self {
        ParamBlock { name: name.to_string(), params: Vec::new(), index: HashMap::new() }
    }

    fn push(&mut self, local: &str, value: Tensor, trainable: bool) {
        let name = format!("{}.{local}", self.name);
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|p| p.value.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockId {
    EH,
    EC,
    DH,
    DC,
    DReid,
    DiscH,
    DiscC,
}

impl BlockId {
    pub const ALL: [BlockId; 7] = [BlockId::EH, BlockId::EC, BlockId::DH, BlockId::DC, BlockId::DReid, BlockId::DiscH, BlockId::DiscC];

    pub fn name(self) -> &'static str {
        match self {
            BlockId::EH => "E_H",
            BlockId::EC => "E_C",
            BlockId::DH => "D_H",
            BlockId::DC => "D_C",
            BlockId::DReid => "D_ReID",
            BlockId::DiscH => "Disc_H",
            BlockId::DiscC => "Disc_C",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleSet {
    pub cfg: NetConfig,
    pub blocks: Vec<ParamBlock>,
}

impl ModuleSet {
    pub fn block(&self, id: BlockId) -> &ParamBlock {
        &self.blocks[id as usize]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut ParamBlock {
        &mut self.blocks[id as usize]
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.blocks.iter().flat_map(|b| b.params.iter())
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let block = name.split('.').next()?;
        let id = BlockId::ALL.into_iter().find(|b| b.name() == block)?;
        self.block_mut(id).get_mut(name)
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        let block = name.split('.').next()?;
        let id = BlockId::ALL.into_iter().find(|b| b.name() == block)?;
        self.block(id).get(name)
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, b: &mut ParamBlock, local: &str, cout: usize, cin: usize, k: usize) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        b.push(&format!("{local}.weight"), Tensor::normal(&[cout, cin, k, k], std, &mut self.rng), true);
        b.push(&format!("{local}.bias"), Tensor::zeros(&[cout]), true);
    }

    /// Transposed conv weight `cin×cout×k×k`; fan-in counts the taps that
    /// reach one output pixel, `cin·k²/s²`.
    fn deconv(&mut self, b: &mut ParamBlock, local: &str, cin: usize, cout: usize, k: usize, s: usize) {
        let std = (2.0 * (s * s) as f64 / (cin * k * k) as f64).sqrt();
        b.push(&format!("{local}.weight"), Tensor::normal(&[cin, cout, k, k], std, &mut self.rng), true);
        b.push(&format!("{local}.bias"), Tensor::zeros(&[cout]), true);
    }

    fn dense(&mut self, b: &mut ParamBlock, local: &str, out: usize, inp: usize, gain: f64) {
        let std = gain * (2.0 / inp as f64).sqrt();
        b.push(&format!("{local}.weight"), Tensor::normal(&[out, inp], std, &mut self.rng), true);
        b.push(&format!("{local}.bias"), Tensor::zeros(&[out]), true);
    }

    fn bn(&mut self, b: &mut ParamBlock, local: &str, c: usize) {
        b.push(&format!("{local}.gamma"), Tensor::ones(&[c]), true);
        b.push(&format!("{local}.beta"), Tensor::zeros(&[c]), true);
        b.push(&format!("{local}.running_mean"), Tensor::zeros(&[c]), false);
        b.push(&format!("{local}.running_var"), Tensor::ones(&[c]), false);
    }

    fn double_conv(&mut self, b: &mut ParamBlock, local: &str, cin: usize, cout: usize) {
        self.conv(b, &format!("{local}.conv1"), cout, cin, 3);
        self.bn(b, &format!("{local}.bn1"), cout);
        self.conv(b, &format!("{local}.conv2"), cout, cout, 3);
        self.bn(b, &format!("{local}.bn2"), cout);
    }
}

const DECONV_K: usize = 4;

/// Builds every module with Kaiming-normal weights, zero biases, unit BN
/// scale and zero shift. Each module draws from its own stream of `seed`.
pub fn build_models(cfg: &NetConfig, seed: u64) -> Result<ModuleSet> {
    cfg.validate()?;
    let init = |id: BlockId| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id.stream());
        (ParamBlock::new(id.name()), Init { rng })
    };
    let mut blocks = Vec::new();
    let w = |i: usize| cfg.stage_width(i);
    for id in BlockId::ALL {
        let (mut b, mut ini) = init(id);
        match id {
            BlockId::EH | BlockId::EC => {
                for i in 1..=cfg.encoder_blocks {
                    let cin = if i == 1 { 3 } else { w(i - 1) };
                    ini.double_conv(&mut b, &format!("block{i}"), cin, w(i));
                }
            }
            BlockId::DH | BlockId::DC => {
                for j in (2..=cfg.encoder_blocks).rev() {
                    ini.double_conv(&mut b, &format!("up{j}"), w(j), w(j));
                    ini.deconv(&mut b, &format!("up{j}.deconv"), w(j), w(j - 1), DECONV_K, 2);
                    ini.bn(&mut b, &format!("up{j}.bn3"), w(j - 1));
                }
                ini.double_conv(&mut b, "fuse", 2 * w(1), w(1));
                ini.deconv(&mut b, "out.deconv", w(1), 3, DECONV_K, 2);
            }
            BlockId::DReid => {
                for i in cfg.encoder_blocks + 1..=cfg.backbone_stages {
                    ini.double_conv(&mut b, &format!("block{i}"), w(i - 1), w(i));
                }
                ini.bn(&mut b, "bn", cfg.embedding_dim);
                if let Some(c) = cfg.num_classes {
                    ini.dense(&mut b, "fc", c, cfg.embedding_dim, 0.5);
                }
            }
            BlockId::DiscH | BlockId::DiscC => {
                let dc = cfg.discriminator_channels;
                let widths = [3, dc, 2 * dc, 4 * dc];
                for l in 1..=3 {
                    ini.conv(&mut b, &format!("conv{l}"), widths[l], widths[l - 1], 3);
                }
                ini.dense(&mut b, "fc", 1, 4 * dc, 0.5);
            }
        }
        blocks.push(b);
    }
    Ok(ModuleSet { cfg: cfg.clone(), blocks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph nodes of a module's trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub ids: HashMap<String, NodeId>,
    /// Bound as gradient-carrying leaves.
    pub trainable: bool,
}

impl Bound {
    fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))
    }
}

/// Adds a module's trainable tensors to `g`, as leaves that collect
/// gradients when `trainable` and as constants otherwise.
pub fn bind(g: &mut Graph, block: &ParamBlock, trainable: bool) -> Bound {
    let ids = block
        .trainable()
        .map(|p| {
            let id = if trainable { g.param(p.value.clone()) } else { g.constant(p.value.clone()) };
            (p.name.clone(), id)
        })
        .collect();
    Bound { ids, trainable }
}

/// A running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub node: NodeId,
}

/// Forward-pass context: BN mode, the model for running statistics, and
/// the pending running-stat updates.
pub struct Ctx<'m> {
    pub models: &'m ModuleSet,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'m> Ctx<'m> {
    pub fn new(models: &'m ModuleSet, mode: Mode) -> Self {
        Ctx { models, mode, bn_updates: Vec::new() }
    }

    fn bn(&mut self, g: &mut Graph, b: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = b.get(&format!("{prefix}.gamma"))?;
        let beta = b.get(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let y = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.bn_updates.push(BnUpdate { prefix: prefix.to_string(), node: y });
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.running(prefix, "running_mean")?;
                let rv = self.running(prefix, "running_var")?;
                g.batch_norm_eval(x, gamma, beta, rm, rv, BN_EPS)
            }
        }
    }

    fn running(&self, prefix: &str, which: &str) -> Result<Tensor> {
        let name = format!("{prefix}.{which}");
        self.models
            .find(&name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("missing running statistic `{name}`")))
    }

    fn conv(&self, g: &mut Graph, b: &Bound, prefix: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let w = b.get(&format!("{prefix}.weight"))?;
        let bias = b.get(&format!("{prefix}.bias"))?;
        g.conv2d(x, w, bias, stride, 1)
    }

    fn deconv(&self, g: &mut Graph, b: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = b.get(&format!("{prefix}.weight"))?;
        let bias = b.get(&format!("{prefix}.bias"))?;
        g.conv2d_transpose(x, w, bias, 2, 1)
    }

    /// conv(stride) → BN → relu → conv → BN → relu
    fn double_conv(&mut self, g: &mut Graph, b: &Bound, prefix: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let h = self.conv(g, b, &format!("{prefix}.conv1"), x, stride)?;
        let h = self.bn(g, b, &format!("{prefix}.bn1"), h)?;
        let h = g.relu(h)?;
        let h = self.conv(g, b, &format!("{prefix}.conv2"), h, 1)?;
        let h = self.bn(g, b, &format!("{prefix}.bn2"), h)?;
        g.relu(h)
    }

    /// Applies the running-statistic updates recorded so far to `models`.
    pub fn apply_bn_updates(updates: &[BnUpdate], g: &Graph, models: &mut ModuleSet) -> Result<()> {
        for u in updates {
            let (mean, var) = g
                .batch_stats(u.node)
                .ok_or_else(|| Error::invalid("batch-norm update refers to a non-batch-norm node"))?;
            for (which, stat) in [("running_mean", mean), ("running_var", var)] {
                let name = format!("{}.{which}", u.prefix);
                let t = models
                    .find_mut(&name)
                    .ok_or_else(|| Error::invalid(format!("missing running statistic `{name}`")))?;
                for (r, s) in t.data_mut().iter_mut().zip(stat) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * s;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOutput {
    /// Features after the last encoder stage.
    pub deep: NodeId,
    /// Features after the first stage (half resolution).
    pub skip: NodeId,
}

fn check_image(g: &Graph, x: NodeId, cfg: &NetConfig, op: &'static str) -> Result<()> {
    match *g.shape(x) {
        [_, 3, h, w] if h == cfg.image_size && w == cfg.image_size => Ok(()),
        _ => Err(Error::shape(op, format!("expected N×3×{0}×{0}, got {1:?}", cfg.image_size, g.shape(x)))),
    }
}

/// Runs encoder `enc` (E_H or E_C) on an image batch. `tag` names the input
/// in the graph's instrumentation trace.
pub fn encode(g: &mut Graph, ctx: &mut Ctx, enc: BlockId, b: &Bound, x: NodeId, tag: &str) -> Result<EncodeOutput> {
    if !matches!(enc, BlockId::EH | BlockId::EC) {
        return Err(Error::invalid(format!("{} is not an encoder", enc.name())));
    }
    check_image(g, x, &ctx.models.cfg, "encode")?;
    g.annotate(format!("{}<-{tag}", enc.name()));
    let name = enc.name();
    let mut h = x;
    let mut skip = x;
    for i in 1..=ctx.models.cfg.encoder_blocks {
        h = ctx.double_conv(g, b, &format!("{name}.block{i}"), h, 2)?;
        if i == 1 {
            skip = h;
        }
    }
    Ok(EncodeOutput { deep: h, skip })
}

/// Image decoder (D_H or D_C): upsampling stages back to half resolution,
/// concatenation with the skip features, then a final upsample to a
/// 3-channel sigmoid image.
pub fn decode_image(g: &mut Graph, ctx: &mut Ctx, dec: BlockId, b: &Bound, feat: EncodeOutput) -> Result<NodeId> {
    if !matches!(dec, BlockId::DH | BlockId::DC) {
        return Err(Error::invalid(format!("{} is not an image decoder", dec.name())));
    }
    let cfg = &ctx.models.cfg;
    let name = dec.name();
    let half = cfg.image_size / 2;
    match *g.shape(feat.skip) {
        [_, c, h, w] if c == cfg.stage_width(1) && h == half && w == half => {}
        ref s => return Err(Error::shape("decode_image", format!("skip features {s:?}"))),
    }
    let mut h = feat.deep;
    for j in (2..=cfg.encoder_blocks).rev() {
        h = ctx.double_conv(g, b, &format!("{name}.up{j}"), h, 1)?;
        h = ctx.deconv(g, b, &format!("{name}.up{j}.deconv"), h)?;
        h = ctx.bn(g, b, &format!("{name}.up{j}.bn3"), h)?;
        h = g.relu(h)?;
    }
    let h = g.concat_channels(h, feat.skip)?;
    let h = ctx.double_conv(g, b, &format!("{name}.fuse"), h, 1)?;
    let h = ctx.deconv(g, b, &format!("{name}.out.deconv"), h)?;
    g.sigmoid(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReidOutput {
    /// Post-BN embedding, `N×embedding_dim`.
    pub embedding: NodeId,
    /// `N×num_classes`, absent when the classifier is not configured.
    pub logits: Option<NodeId>,
}

/// Remaining backbone stages → GAP → BN (the embedding) → FC logits.
pub fn reid_head(g: &mut Graph, ctx: &mut Ctx, b: &Bound, feat: EncodeOutput) -> Result<ReidOutput> {
    let cfg = ctx.models.cfg.clone();
    let mut h = feat.deep;
    for i in cfg.encoder_blocks + 1..=cfg.backbone_stages {
        h = ctx.double_conv(g, b, &format!("D_ReID.block{i}"), h, 2)?;
    }
    let pooled = g.global_avg_pool(h)?;
    let embedding = ctx.bn(g, b, "D_ReID.bn", pooled)?;
    let logits = match (cfg.num_classes, ctx.mode) {
        (Some(_), _) => {
            let w = b.get("D_ReID.fc.weight")?;
            let bias = b.get("D_ReID.fc.bias")?;
            Some(g.dense(embedding, w, bias)?)
        }
        (None, Mode::Train) => return Err(Error::invalid("num_classes must be set to train the classifier")),
        (None, Mode::Eval) => None,
    };
    Ok(ReidOutput { embedding, logits })
}

/// Probability that each image in the batch is real, shape `N×1`.
pub fn discriminate(g: &mut Graph, ctx: &Ctx, disc: BlockId, b: &Bound, x: NodeId) -> Result<NodeId> {
    if !matches!(disc, BlockId::DiscH | BlockId::DiscC) {
        return Err(Error::invalid(format!("{} is not a discriminator", disc.name())));
    }
    check_image(g, x, &ctx.models.cfg, "discriminate")?;
    let name = disc.name();
    let mut h = x;
    for l in 1..=3 {
        h = ctx.conv(g, b, &format!("{name}.conv{l}"), h, 2)?;
        h = g.relu(h)?;
    }
    let h = g.global_avg_pool(h)?;
    let w = b.get(&format!("{name}.fc.weight"))?;
    let bias = b.get(&format!("{name}.fc.bias"))?;
    let logit = g.dense(h, w, bias)?;
    g.sigmoid(logit)
}
