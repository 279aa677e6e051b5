//! Retrieval evaluation: embeddings, probe×gallery distances, CMC and mAP.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::net::{bind, decode_image, encode, reid_head, BlockId, Ctx, Mode, ModuleSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Probe,
    Gallery,
}

/// Row-aligned embeddings, identities and roles.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `N×D`.
    pub embeddings: Tensor,
    pub ids: Vec<u64>,
    pub roles: Vec<Role>,
}

impl EmbeddingSet {
    pub fn new(embeddings: Tensor, ids: Vec<u64>, roles: Vec<Role>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != ids.len() || ids.len() != roles.len() {
            return Err(Error::shape(
                "EmbeddingSet",
                format!("embeddings {:?}, {} ids, {} roles", embeddings.shape(), ids.len(), roles.len()),
            ));
        }
        Ok(EmbeddingSet { embeddings, ids, roles })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }

    pub fn rows(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }
}

const EXTRACT_CHUNK: usize = 32;

/// Post-BN embeddings of `samples` in eval mode: hazy images through E_H,
/// clear through E_C, then D_ReID. Only those modules are read.
pub fn extract_embeddings(models: &ModuleSet, samples: &[&Sample]) -> Result<EmbeddingSet> {
    let size = models.cfg.image_size;
    let mut roles = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image.shape() != [3, size, size] {
            return Err(Error::shape(
                "extract_embeddings",
                format!("image {:?} does not match model size {size}", s.image.shape()),
            ));
        }
        roles.push(match s.split {
            Split::Probe => Role::Probe,
            Split::Gallery => Role::Gallery,
            Split::Train => return Err(Error::invalid("training sample passed to evaluation")),
        });
    }
    // runs of consecutive samples of one domain kind, chunked
    let mut jobs: Vec<(bool, Vec<usize>)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let hazy = s.domain.is_hazy();
        match jobs.last_mut() {
            Some((h, v)) if *h == hazy && v.len() < EXTRACT_CHUNK => v.push(i),
            _ => jobs.push((hazy, vec![i])),
        }
    }
    let parts = jobs
        .par_iter()
        .map(|(hazy, idx)| {
            let imgs: Vec<Tensor> = idx.iter().map(|&i| samples[i].image.clone()).collect();
            embed_batch(models, Tensor::stack(&imgs)?, *hazy)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = models.cfg.embedding_dim;
    let mut data = Vec::with_capacity(samples.len() * d);
    for p in parts {
        data.extend(p.into_data());
    }
    EmbeddingSet::new(
        Tensor::new(vec![samples.len(), d], data)?,
        samples.iter().map(|s| s.identity).collect(),
        roles,
    )
}

/// Eval-mode embeddings of an `N×3×H×W` batch.
pub fn embed_batch(models: &ModuleSet, images: Tensor, hazy: bool) -> Result<Tensor> {
    let enc = if hazy { BlockId::EH } else { BlockId::EC };
    let mut g = Graph::new();
    let x = g.constant(images);
    let mut ctx = Ctx::new(models, Mode::Eval);
    let be = bind(&mut g, models.block(enc), false);
    let br = bind(&mut g, models.block(BlockId::DReid), false);
    let f = encode(&mut g, &mut ctx, enc, &be, x, if hazy { "eval_hazy" } else { "eval_clear" })?;
    let r = reid_head(&mut g, &mut ctx, &br, f)?;
    Ok(g.value(r.embedding).clone())
}

/// Eval-mode domain translation of an `N×3×H×W` batch: hazy to clear
/// through E_H and D_C, or clear to hazy through E_C and D_H.
pub fn translate(models: &ModuleSet, images: Tensor, to_clear: bool) -> Result<Tensor> {
    let (enc, dec) = if to_clear { (BlockId::EH, BlockId::DC) } else { (BlockId::EC, BlockId::DH) };
    let mut g = Graph::new();
    let x = g.constant(images);
    let mut ctx = Ctx::new(models, Mode::Eval);
    let be = bind(&mut g, models.block(enc), false);
    let bd = bind(&mut g, models.block(dec), false);
    let f = encode(&mut g, &mut ctx, enc, &be, x, "translate")?;
    let y = decode_image(&mut g, &mut ctx, dec, &bd, f)?;
    Ok(g.value(y).clone())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Probe×gallery Euclidean distances, rows and columns in set order.
pub fn distance_matrix(set: &EmbeddingSet) -> Result<Tensor> {
    let probes = set.rows(Role::Probe);
    let gallery = set.rows(Role::Gallery);
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::invalid(format!("{} probes and {} gallery rows; both must be non-empty", probes.len(), gallery.len())));
    }
    let data = probes
        .iter()
        .flat_map(|&p| gallery.iter().map(move |&g| (p, g)))
        .map(|(p, g)| euclidean(set.row(p), set.row(g)))
        .collect();
    Tensor::new(vec![probes.len(), gallery.len()], data)
}

/// Non-interpolated average precision of a ranked relevance list; `None`
/// when nothing is relevant.
pub fn average_precision(ranked: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ranks: Vec<usize>,
    /// Include per-probe ranked gallery rows in the report.
    pub export_ranking: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ranks: vec![1, 5, 10], export_ranking: false }
    }
}

impl EvalConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(("ranks", format!("must be a non-empty list of positive ranks, got {:?}", self.ranks)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRanking {
    /// Set row of the probe.
    pub probe: usize,
    /// Set rows of the gallery, nearest first.
    pub gallery: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// CMC at the requested ranks.
    pub cmc: BTreeMap<usize, f64>,
    /// CMC at every rank from 1 to the largest requested rank.
    pub cmc_curve: Vec<f64>,
    pub excluded_probes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<Vec<ProbeRanking>>,
    pub ranks: Vec<usize>,
}

/// Ranks the gallery for every probe (distance ascending, ties by gallery
/// position) and computes CMC and mAP over probes with at least one match.
pub fn evaluate(set: &EmbeddingSet, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.check().map_err(|(k, reason)| Error::Config { path: format!("eval.{k}"), reason })?;
    let probes = set.rows(Role::Probe);
    let gallery = set.rows(Role::Gallery);
    let mut per_id: BTreeMap<u64, usize> = BTreeMap::new();
    for &p in &probes {
        *per_id.entry(set.ids[p]).or_default() += 1;
    }
    if let Some((id, n)) = per_id.iter().find(|(_, &n)| n > 1) {
        return Err(Error::Protocol(format!("identity {id} has {n} probes, expected one")));
    }
    let dist = distance_matrix(set)?;
    let g = gallery.len();
    let max_rank = *cfg.ranks.iter().max().expect("checked non-empty");

    let per_probe: Vec<(Option<f64>, Option<usize>, Vec<usize>)> = probes
        .par_iter()
        .enumerate()
        .map(|(pi, &p)| {
            let row = &dist.data()[pi * g..(pi + 1) * g];
            let mut order: Vec<usize> = (0..g).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let flags: Vec<bool> = order.iter().map(|&j| set.ids[gallery[j]] == set.ids[p]).collect();
            let first = flags.iter().position(|&f| f);
            (average_precision(&flags), first, order.iter().map(|&j| gallery[j]).collect())
        })
        .collect();

    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    let mut hits_at = vec![0usize; max_rank];
    for (ap, first, _) in &per_probe {
        if let Some(ap) = ap {
            ap_sum += ap;
            counted += 1;
            if let Some(f) = first {
                for h in hits_at.iter_mut().skip(*f) {
                    *h += 1;
                }
            }
        }
    }
    let excluded = probes.len() - counted;
    let denom = counted.max(1) as f64;
    let cmc_curve: Vec<f64> = hits_at.iter().map(|&h| h as f64 / denom).collect();
    let cmc = cfg.ranks.iter().map(|&r| (r, cmc_curve[r - 1])).collect();
    let ranking = cfg.export_ranking.then(|| {
        probes
            .iter()
            .zip(&per_probe)
            .map(|(&p, (_, _, order))| ProbeRanking { probe: p, gallery: order.clone() })
            .collect()
    });
    Ok(EvalReport {
        map: if counted == 0 { 0.0 } else { ap_sum / counted as f64 },
        cmc,
        cmc_curve,
        excluded_probes: excluded,
        ranking,
        ranks: cfg.ranks.clone(),
    })
}

/// Protocol-checked evaluation on the real (or synthetic) eval identities
/// of a dataset.
pub fn evaluate_dataset(models: &ModuleSet, data: &Dataset, real: bool, cfg: &EvalConfig) -> Result<EvalReport> {
    let idx = data.eval_indices(real);
    if idx.is_empty() {
        return Err(Error::invalid(format!("dataset has no {} eval images", if real { "real" } else { "synthetic" })));
    }
    let records: Vec<_> = data
        .manifest
        .records
        .iter()
        .filter(|r| r.split != Split::Train && r.domain.is_real() == real)
        .collect();
    crate::data::check_protocol(&records)?;
    let samples: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
    let set = extract_embeddings(models, &samples)?;
    evaluate(&set, cfg)
}
