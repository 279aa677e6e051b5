//! Toy vehicle corpus: generation, on-disk layout, splits and batching.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.jsonl            one record per stored image
//! dataset.json              seed, generator version, resolved config
//! <domain>/<id>/<view>.png  8-bit RGB images
//! depth/<id>/<view>.png     16-bit depth of synthetic views
//! ```

pub mod codec;
pub mod manifest;
pub mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::{self, HazeParams};
use crate::tensor::Tensor;

pub use manifest::{Domain, Manifest, Record, Split};
pub use render::{generate_identity, render_instance, stream_rng, Identity, Purpose, RenderConfig};

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub syn_identities: u64,
    /// Trailing synthetic identities held out for evaluation.
    pub syn_eval_identities: u64,
    pub real_identities: u64,
    /// Trailing real identities held out for evaluation.
    pub real_eval_identities: u64,
    /// First real identity id; defaults to right after the synthetic ids.
    pub real_id_offset: Option<u64>,
    pub views_per_identity: u32,
    pub view_jitter: f64,
    pub syn_beta: [f64; 2],
    pub syn_airlight: [f64; 2],
    pub real: RealHazeConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 64,
            syn_identities: 120,
            syn_eval_identities: 20,
            real_identities: 60,
            real_eval_identities: 30,
            real_id_offset: None,
            views_per_identity: 8,
            view_jitter: 1.0,
            syn_beta: [0.4, 1.6],
            syn_airlight: [0.5, 1.0],
            real: RealHazeConfig::default(),
        }
    }
}

/// The shifted haze and sensor model of the "real" domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealHazeConfig {
    pub beta: [f64; 2],
    pub airlight: [f64; 2],
    /// Per-channel airlight offset bound.
    pub airlight_jitter: f64,
    /// Relative top-to-bottom airlight change bound.
    pub airlight_gradient: f64,
    pub noise_sigma: f64,
    pub gamma_jitter: f64,
}

impl Default for RealHazeConfig {
    fn default() -> Self {
        RealHazeConfig {
            beta: [0.8, 2.2],
            airlight: [0.5, 1.0],
            airlight_jitter: 0.08,
            airlight_gradient: 0.1,
            noise_sigma: 0.01,
            gamma_jitter: 0.1,
        }
    }
}

fn range_ok(r: [f64; 2], lo: f64, hi: f64) -> bool {
    r[0] <= r[1] && r[0] >= lo && r[1] <= hi
}

impl DataConfig {
    pub fn real_offset(&self) -> u64 {
        self.real_id_offset.unwrap_or(self.syn_identities)
    }

    pub fn syn_train_ids(&self) -> std::ops::Range<u64> {
        0..self.syn_identities - self.syn_eval_identities
    }

    pub fn syn_eval_ids(&self) -> std::ops::Range<u64> {
        self.syn_identities - self.syn_eval_identities..self.syn_identities
    }

    pub fn real_train_ids(&self) -> std::ops::Range<u64> {
        let o = self.real_offset();
        o..o + self.real_identities - self.real_eval_identities
    }

    pub fn real_eval_ids(&self) -> std::ops::Range<u64> {
        let o = self.real_offset();
        o + self.real_identities - self.real_eval_identities..o + self.real_identities
    }

    /// Checks every constraint; `Err` carries `(key, reason)`.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.image_size < 8 {
            return Err(("image_size", "must be at least 8".into()));
        }
        if self.syn_eval_identities > self.syn_identities {
            return Err(("syn_eval_identities", "exceeds syn_identities".into()));
        }
        if self.real_eval_identities > self.real_identities {
            return Err(("real_eval_identities", "exceeds real_identities".into()));
        }
        if self.real_offset() < self.syn_identities {
            return Err(("real_id_offset", "real identity range overlaps the synthetic range".into()));
        }
        if self.views_per_identity < 2 {
            return Err(("views_per_identity", "must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.view_jitter) {
            return Err(("view_jitter", "must lie in [0,1]".into()));
        }
        if !range_ok(self.syn_beta, haze::BETA_RANGE.0, haze::BETA_RANGE.1) {
            return Err(("syn_beta", "must be an ordered range within [0.05, 5]".into()));
        }
        if !range_ok(self.syn_airlight, 0.0, 1.0) {
            return Err(("syn_airlight", "must be an ordered range within [0,1]".into()));
        }
        let r = &self.real;
        if !range_ok(r.beta, haze::BETA_RANGE.0, haze::BETA_RANGE.1) {
            return Err(("real.beta", "must be an ordered range within [0.05, 5]".into()));
        }
        if !range_ok(r.airlight, 0.0, 1.0) {
            return Err(("real.airlight", "must be an ordered range within [0,1]".into()));
        }
        for (k, v) in [
            ("real.airlight_jitter", r.airlight_jitter),
            ("real.airlight_gradient", r.airlight_gradient),
            ("real.noise_sigma", r.noise_sigma),
            ("real.gamma_jitter", r.gamma_jitter),
        ] {
            if !(0.0..0.5).contains(&v) {
                return Err((k, "must lie in [0, 0.5)".into()));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(k, reason)| Error::Config { path: format!("data.{k}"), reason })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub generator_version: u32,
    pub config: DataConfig,
}

/// Identities for `ids`, drawn in order; a draw whose attribute signature
/// collides with an earlier one is redrawn from the same stream.
pub fn generate_identities(seed: u64, ids: impl IntoIterator<Item = u64>, taken: &mut BTreeSet<(u32, u32, u32, u32, u8, u8)>) -> Vec<Identity> {
    ids.into_iter()
        .map(|id| {
            let mut rng = stream_rng(seed, Purpose::Identity, id);
            loop {
                let ident = generate_identity(id, &mut rng);
                if taken.insert(ident.signature()) {
                    return ident;
                }
            }
        })
        .collect()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..r[1]) }
}

/// Synthetic-domain haze draw: homogeneous achromatic airlight.
pub fn draw_syn_haze<R: Rng + ?Sized>(rng: &mut R, cfg: &DataConfig) -> HazeParams {
    let beta = uniform(rng, cfg.syn_beta);
    let a = uniform(rng, cfg.syn_airlight);
    HazeParams { beta, airlight: [a, a, a] }
}

/// Sensor response of the real domain: gamma jitter then Gaussian noise.
pub fn apply_sensor<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, cfg: &RealHazeConfig) -> Tensor {
    let gamma = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.gamma_jitter;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut out = img.clone();
    for v in out.data_mut() {
        let n = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        *v = (v.max(0.0).powf(gamma) + n).clamp(0.0, 1.0);
    }
    out
}

/// Real-domain haze: shifted β, chromatic airlight with a vertical
/// gradient, then the sensor model. Returns the image and the base haze
/// parameters.
pub fn render_real_hazy<R: Rng + ?Sized>(clear: &Tensor, depth: &Tensor, rng: &mut R, cfg: &RealHazeConfig) -> Result<(Tensor, HazeParams)> {
    let beta = uniform(rng, cfg.beta);
    let base = uniform(rng, cfg.airlight);
    let airlight: [f64; 3] = std::array::from_fn(|_| (base + rng.gen_range(-1.0..=1.0) * cfg.airlight_jitter).clamp(0.0, 1.0));
    let grad = rng.gen_range(-1.0..=1.0) * cfg.airlight_gradient;
    let t = haze::transmission_from_depth(depth, beta)?;
    let [_, h, w] = *clear.shape() else {
        return Err(Error::shape("render_real_hazy", format!("{:?}", clear.shape())));
    };
    let hw = h * w;
    let mut out = clear.clone();
    for (c, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        for (p, v) in plane.iter_mut().enumerate() {
            let row = (p / w) as f64 / (h.max(2) - 1) as f64;
            let a = (airlight[c] * (1.0 + grad * (row - 0.5))).clamp(0.0, 1.0);
            let tv = t.data()[p];
            *v = *v * tv + a * (1.0 - tv);
        }
    }
    Ok((apply_sensor(&out, rng, cfg), HazeParams { beta, airlight }))
}

fn rel_path(domain: &str, id: u64, view: u32) -> String {
    format!("{domain}/{id}/{view}.png")
}

struct Pending {
    rel: String,
    image: Tensor,
}

/// Generates the corpus into `out`, writes `manifest.jsonl` and
/// `dataset.json`, and returns the manifest. Output is a pure function of
/// `(cfg, seed)` regardless of thread count.
pub fn generate_dataset(cfg: &DataConfig, seed: u64, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut taken = BTreeSet::new();
    let syn = generate_identities(seed, 0..cfg.syn_identities, &mut taken);
    let real_ids = cfg.real_offset()..cfg.real_offset() + cfg.real_identities;
    let real = generate_identities(seed, real_ids, &mut taken);
    let rcfg = RenderConfig { size: cfg.image_size, jitter: cfg.view_jitter };
    let syn_eval = cfg.syn_eval_ids();
    let real_eval = cfg.real_eval_ids();

    let per_identity = |ident: &Identity, is_real: bool| -> Result<(Vec<Record>, Vec<Pending>)> {
        let mut recs = Vec::new();
        let mut files = Vec::new();
        for view in 0..cfg.views_per_identity {
            let idx = render::view_index(ident.id, view);
            let r = render_instance(ident, &mut stream_rng(seed, Purpose::View, idx), &rcfg);
            let mut hrng = stream_rng(seed, Purpose::Haze, idx);
            if !is_real {
                let eval = syn_eval.contains(&ident.id);
                let hp = draw_syn_haze(&mut hrng, cfg);
                let t = haze::transmission_from_depth(&r.depth, hp.beta)?;
                let hazy = haze::synthesize_haze(&r.image, &t, &hp)?;
                files.push(Pending { rel: rel_path("syn_clear", ident.id, view), image: r.image });
                files.push(Pending { rel: rel_path("syn_hazy", ident.id, view), image: hazy });
                files.push(Pending { rel: rel_path("depth", ident.id, view), image: r.depth });
                if !eval {
                    recs.push(Record {
                        id: ident.id,
                        path: rel_path("syn_clear", ident.id, view),
                        domain: Domain::SynClear,
                        split: Split::Train,
                        beta: None,
                        airlight: None,
                    });
                }
                recs.push(Record {
                    id: ident.id,
                    path: rel_path("syn_hazy", ident.id, view),
                    domain: Domain::SynHazy,
                    split: if eval { Split::Gallery } else { Split::Train },
                    beta: Some(hp.beta),
                    airlight: Some(hp.airlight),
                });
            } else {
                let eval = real_eval.contains(&ident.id);
                let mut srng = stream_rng(seed, Purpose::Sensor, idx);
                if eval || view % 2 == 1 {
                    let (hazy, hp) = render_real_hazy(&r.image, &r.depth, &mut srng, &cfg.real)?;
                    let rel = rel_path("real_hazy", ident.id, view);
                    files.push(Pending { rel: rel.clone(), image: hazy });
                    recs.push(Record {
                        id: ident.id,
                        path: rel,
                        domain: Domain::RealHazy,
                        split: if eval { Split::Gallery } else { Split::Train },
                        beta: Some(hp.beta),
                        airlight: Some(hp.airlight),
                    });
                } else {
                    let clear = apply_sensor(&r.image, &mut srng, &cfg.real);
                    let rel = rel_path("real_clear", ident.id, view);
                    files.push(Pending { rel: rel.clone(), image: clear });
                    recs.push(Record { id: ident.id, path: rel, domain: Domain::RealClear, split: Split::Train, beta: None, airlight: None });
                }
            }
        }
        Ok((recs, files))
    };

    let jobs: Vec<(&Identity, bool)> = syn.iter().map(|i| (i, false)).chain(real.iter().map(|i| (i, true))).collect();
    let results: Vec<Vec<Record>> = jobs
        .par_iter()
        .map(|&(ident, is_real)| {
            let (recs, files) = per_identity(ident, is_real)?;
            for f in files {
                let path = out.join(&f.rel);
                if f.rel.starts_with("depth/") {
                    codec::write_depth(&path, &f.image)?;
                } else {
                    codec::write_rgb(&path, &f.image)?;
                }
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest { records: results.into_iter().flatten().collect() };
    let eval_ids: Vec<u64> = syn_eval.chain(real_eval).collect();
    let manifest = split_probe_gallery(&manifest, &eval_ids, seed)?;
    manifest.write(&out.join("manifest.jsonl"))?;
    let info = DatasetInfo { seed, generator_version: GENERATOR_VERSION, config: cfg.clone() };
    std::fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(manifest)
}

/// Assigns, for each eval identity, one uniformly chosen hazy image to the
/// probe set and every other image of that identity to the gallery.
pub fn split_probe_gallery(manifest: &Manifest, eval_ids: &[u64], seed: u64) -> Result<Manifest> {
    let eval: BTreeSet<u64> = eval_ids.iter().copied().collect();
    let mut hazy: BTreeMap<u64, Vec<usize>> = eval.iter().map(|&id| (id, Vec::new())).collect();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.domain.is_hazy() {
            if let Some(v) = hazy.get_mut(&r.id) {
                v.push(i);
            }
        }
    }
    let short: Vec<u64> = hazy.iter().filter(|(_, v)| v.len() < 2).map(|(&id, _)| id).collect();
    if !short.is_empty() {
        return Err(Error::Protocol(format!("identities with fewer than 2 hazy images: {short:?}")));
    }
    let mut out = manifest.clone();
    for r in out.records.iter_mut().filter(|r| eval.contains(&r.id)) {
        r.split = Split::Gallery;
    }
    for (id, idx) in hazy {
        let pick = *idx.choose(&mut stream_rng(seed, Purpose::Split, id)).expect("non-empty");
        out.records[pick].split = Split::Probe;
    }
    Ok(out)
}

/// Checks the one-hazy-probe-per-identity protocol.
pub fn check_protocol(records: &[&Record]) -> Result<()> {
    let mut probes: BTreeMap<u64, usize> = BTreeMap::new();
    let mut gallery: BTreeSet<u64> = BTreeSet::new();
    for r in records {
        match r.split {
            Split::Probe => {
                if !r.domain.is_hazy() {
                    return Err(Error::Protocol(format!("probe `{}` is not a hazy image", r.path)));
                }
                *probes.entry(r.id).or_default() += 1;
            }
            Split::Gallery => {
                gallery.insert(r.id);
            }
            Split::Train => {}
        }
    }
    if let Some((id, n)) = probes.iter().find(|(_, &n)| n != 1) {
        return Err(Error::Protocol(format!("identity {id} has {n} probes, expected exactly one")));
    }
    if let Some(id) = gallery.iter().find(|id| !probes.contains_key(id)) {
        return Err(Error::Protocol(format!("gallery identity {id} has no probe")));
    }
    Ok(())
}

/// An image held in memory, with its ground-truth pair when it has one.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub identity: u64,
    pub domain: Domain,
    pub pair: Option<Tensor>,
    pub haze: Option<HazeParams>,
    pub split: Split,
}

/// A generated corpus loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: Option<DatasetInfo>,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        Self::load_where(root, |_| true)
    }

    /// Loads only the records accepted by `keep`; the full manifest is kept.
    pub fn load_where(root: &Path, keep: impl Fn(&Record) -> bool + Sync) -> Result<Self> {
        let manifest = Manifest::read(&root.join("manifest.jsonl"))?;
        let info = match std::fs::read_to_string(root.join("dataset.json")) {
            Ok(s) => Some(serde_json::from_str(&s)?),
            Err(_) => None,
        };
        let samples = manifest
            .records
            .par_iter()
            .filter(|r| keep(r))
            .map(|r| {
                let image = codec::read_rgb(&root.join(&r.path))?;
                let pair = match r.pair_path() {
                    Some(p) => Some(codec::read_rgb(&root.join(p))?),
                    None => None,
                };
                Ok(Sample { image, identity: r.id, domain: r.domain, pair, haze: r.haze(), split: r.split })
            })
            .collect::<Result<Vec<_>>>()?;
        let size = samples.first().map(|s| s.image.shape().to_vec());
        if let Some(bad) = samples.iter().find(|s| Some(s.image.shape().to_vec()) != size) {
            return Err(Error::invalid(format!("image sizes differ within dataset: {:?} vs {:?}", bad.image.shape(), size)));
        }
        Ok(Dataset { root: root.to_path_buf(), info, manifest, samples })
    }

    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[1])
    }

    /// Indices of samples matching `domain` and `split`.
    pub fn indices(&self, domain: Domain, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].domain == domain && self.samples[i].split == split)
            .collect()
    }

    /// Indices of all samples in `split` with a hazy domain.
    pub fn eval_indices(&self, real: bool) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| {
                let s = &self.samples[i];
                s.split != Split::Train && s.domain.is_real() == real
            })
            .collect()
    }
}

/// Random crop after edge-replicate padding, and horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    pub enabled: bool,
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { enabled: true, pad: 4, flip_prob: 0.5 }
    }
}

/// Applies one crop/flip draw identically to every image in `imgs`.
pub fn augment<R: Rng + ?Sized>(imgs: &[&Tensor], aug: &Augment, rng: &mut R) -> Vec<Tensor> {
    if !aug.enabled {
        return imgs.iter().map(|t| (*t).clone()).collect();
    }
    let oy = rng.gen_range(0..=2 * aug.pad) as isize - aug.pad as isize;
    let ox = rng.gen_range(0..=2 * aug.pad) as isize - aug.pad as isize;
    let flip = rng.gen_bool(aug.flip_prob.clamp(0.0, 1.0));
    imgs.iter()
        .map(|t| {
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let d = t.data();
            Tensor::from_fn(&[c, h, w], |i| {
                let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                let x = if flip { w - 1 - x } else { x };
                let sy = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                d[ch * h * w + sy * w + sx]
            })
        })
        .collect()
}

/// Draws `P` identities and `K` samples of each from a pool of sample
/// indices grouped by identity. Identities are drawn without replacement
/// (all of them if fewer than `P`); views without replacement when the
/// identity has at least `K`.
#[derive(Clone, Debug)]
pub struct PkSampler {
    groups: Vec<(u64, Vec<usize>)>,
}

impl PkSampler {
    pub fn new(samples: &[Sample], pool: &[usize]) -> Result<Self> {
        let mut m: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for &i in pool {
            m.entry(samples[i].identity).or_default().push(i);
        }
        if m.len() < 2 {
            return Err(Error::invalid(format!("P×K sampling needs at least 2 identities, pool has {}", m.len())));
        }
        Ok(PkSampler { groups: m.into_iter().collect() })
    }

    pub fn identities(&self) -> usize {
        self.groups.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, p: usize, k: usize, rng: &mut R) -> Vec<usize> {
        let chosen: Vec<&(u64, Vec<usize>)> = self.groups.choose_multiple(rng, p.min(self.groups.len())).collect();
        let mut out = Vec::with_capacity(p * k);
        for (_, idx) in chosen {
            if idx.len() >= k {
                out.extend(idx.choose_multiple(rng, k).copied());
            } else {
                out.extend((0..k).map(|_| *idx.choose(rng).expect("non-empty group")));
            }
        }
        out
    }
}

/// Stacks `3×H×W` images into an `N×3×H×W` batch.
pub fn stack_batch(images: &[Tensor]) -> Result<Tensor> {
    Tensor::stack(images)
}
