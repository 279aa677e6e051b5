//! Train-then-evaluate runs and the ablation matrices built from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, EvalReport};
use crate::net::{build_models, ModuleSet};
use crate::train::{fit, fit_to_dir, num_classes, training_records, FitSummary, StageToggles};

/// A named edit of a base configuration.
#[derive(Clone, Copy, Debug)]
pub struct Variant {
    pub name: &'static str,
    pub apply: fn(&mut RunConfig),
}

fn stages(cfg: &mut RunConfig, real_clear: bool, real_hazy: bool) {
    cfg.train.stages = StageToggles { supervised: true, real_clear, real_hazy };
}

/// Which training data stages run.
pub const STAGE_MATRIX: [Variant; 4] = [
    Variant { name: "syn", apply: |c| stages(c, false, false) },
    Variant { name: "syn+rc", apply: |c| stages(c, true, false) },
    Variant { name: "syn+rh", apply: |c| stages(c, false, true) },
    Variant { name: "full", apply: |c| stages(c, true, true) },
];

/// Full training with loss groups switched off.
pub const LOSS_MATRIX: [Variant; 2] = [
    Variant {
        name: "full-cr-midc",
        apply: |c| {
            c.train.weights.w_cr = 0.0;
            c.train.weights.w_midc = 0.0;
        },
    },
    Variant {
        name: "full-dc-tv",
        apply: |c| {
            c.train.weights.w_dc = 0.0;
            c.train.weights.w_tv = 0.0;
        },
    },
];

pub const ENCODER_DEPTH: Variant = Variant { name: "full-enc4", apply: |c| c.net.encoder_blocks = 4 };

pub const F_VARIANT: Variant = Variant { name: "full-f", apply: |c| c.train.f_variant = true };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub variant: String,
    pub seed: u64,
    pub real: EvalReport,
    pub synthetic: EvalReport,
    pub iterations: usize,
}

/// Trains on the training split of `data_root`; real images are not loaded
/// unless a real stage runs. With `out`, writes the resolved config,
/// training log and checkpoint there.
pub fn train(cfg: &RunConfig, data_root: &Path, out: Option<&Path>) -> Result<(ModuleSet, FitSummary)> {
    cfg.validate()?;
    let train = Dataset::load_where(data_root, training_records(&cfg.train.stages))?;
    if let Some(size) = train.image_size() {
        if size != cfg.net.image_size {
            return Err(Error::Config {
                path: "net.image_size".into(),
                reason: format!("{} differs from the dataset's {size}", cfg.net.image_size),
            });
        }
    }
    let mut net = cfg.net.clone();
    net.num_classes = Some(num_classes(&train, &cfg.train));
    let mut models = build_models(&net, cfg.train.seed)?;
    let summary = match out {
        Some(dir) => {
            let resolved = RunConfig { net: net.clone(), ..cfg.clone() };
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            resolved.write_echo(dir)?;
            fit_to_dir(&mut models, &train, &cfg.train, dir)?
        }
        None => fit(&mut models, &train, &cfg.train, |_| Ok(()))?,
    };
    Ok((models, summary))
}

/// [`train`], then evaluation on the real and synthetic eval sets.
pub fn train_and_eval(cfg: &RunConfig, data_root: &Path, out: Option<&Path>) -> Result<(ModuleSet, FitSummary, [EvalReport; 2])> {
    let (models, summary) = train(cfg, data_root, out)?;
    let eval = Dataset::load_where(data_root, |r| r.split != Split::Train)?;
    let real = evaluate_dataset(&models, &eval, true, &cfg.eval)?;
    let synthetic = evaluate_dataset(&models, &eval, false, &cfg.eval)?;
    Ok((models, summary, [real, synthetic]))
}

/// One row per (variant, seed), each an independent run from `base`.
pub fn run_matrix(
    base: &RunConfig,
    data_root: &Path,
    variants: &[Variant],
    seeds: &[u64],
    mut on_row: impl FnMut(&RunOutcome),
) -> Result<Vec<RunOutcome>> {
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            (v.apply)(&mut cfg);
            cfg.train.seed = seed;
            let (_, summary, [real, synthetic]) = train_and_eval(&cfg, data_root, None)?;
            let row = RunOutcome { variant: v.name.to_string(), seed, real, synthetic, iterations: summary.iterations };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Median of real-domain mAP per variant, in first-seen order.
pub fn median_real_map(rows: &[RunOutcome]) -> Vec<(String, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.variant == n).map(|r| r.real.map).collect();
            (n.to_string(), median(&vals))
        })
        .collect()
}

pub fn median(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return f64::NAN;
    }
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Markdown comparison table, one row per run plus per-variant medians.
pub fn comparison_table(rows: &[RunOutcome]) -> String {
    let mut s = String::from("| variant | seed | real mAP | real CMC@1 | real CMC@5 | syn mAP | syn CMC@1 |\n|---|---|---|---|---|---|---|\n");
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let at = |r: &EvalReport, k: usize| r.cmc.get(&k).map_or("-".to_string(), |&v| pct(v));
    for r in rows {
        s += &format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.variant,
            r.seed,
            pct(r.real.map),
            at(&r.real, 1),
            at(&r.real, 5),
            pct(r.synthetic.map),
            at(&r.synthetic, 1)
        );
    }
    s += "\n| variant | median real mAP |\n|---|---|\n";
    for (n, m) in median_real_map(rows) {
        s += &format!("| {n} | {} |\n", pct(m));
    }
    s
}
