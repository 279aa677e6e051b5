use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvsl::data::{generate_dataset, DataConfig, Dataset, Sample, Split};
use rvsl::eval::*;
use rvsl::net::{build_models, ModuleSet, NetConfig};
use rvsl::{Error, Tensor};

fn corpus() -> &'static Dataset {
    static DATA: OnceLock<(tempfile::TempDir, Dataset)> = OnceLock::new();
    &DATA
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = DataConfig {
                image_size: 16,
                syn_identities: 6,
                syn_eval_identities: 3,
                real_identities: 6,
                real_eval_identities: 3,
                views_per_identity: 4,
                ..DataConfig::default()
            };
            generate_dataset(&cfg, 9, dir.path()).unwrap();
            let data = Dataset::load(dir.path()).unwrap();
            (dir, data)
        })
        .1
}

fn models(seed: u64) -> ModuleSet {
    let cfg = NetConfig { image_size: 16, base_channels: 4, embedding_dim: 8, discriminator_channels: 4, ..NetConfig::default() };
    build_models(&cfg, seed).unwrap()
}

fn eval_samples(data: &Dataset) -> Vec<&Sample> {
    data.samples.iter().filter(|s| s.split != Split::Train).collect()
}

#[test]
fn extraction_is_row_aligned_and_deterministic() {
    let data = corpus();
    let m = models(0);
    let mut samples = eval_samples(data);
    samples.push(samples[0]);
    let set = extract_embeddings(&m, &samples).unwrap();
    assert_eq!((set.len(), set.dim()), (samples.len(), 8));
    assert_eq!(set.row(0), set.row(samples.len() - 1));
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(set.ids[i], s.identity);
        // one at a time gives the same row
        let alone = extract_embeddings(&m, &[*s]).unwrap();
        let d = set.row(i).iter().zip(alone.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "row {i}: {d}");
    }
    assert_eq!(extract_embeddings(&m, &samples).unwrap(), set);
}

#[test]
fn inference_ignores_decoders_and_discriminators() {
    let data = corpus();
    let m = models(1);
    let samples = eval_samples(data);
    let base = extract_embeddings(&m, &samples).unwrap();
    let mut pert = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = pert.params().map(|p| p.name.clone()).collect();
    for name in names.iter().filter(|n| ["D_C.", "D_H.", "Disc_C.", "Disc_H."].iter().any(|b| n.starts_with(b))) {
        let t = pert.find_mut(name).unwrap();
        for v in t.data_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
    }
    assert_eq!(extract_embeddings(&pert, &samples).unwrap(), base);

    // every eval sample here is hazy, so E_C is never read either
    assert!(samples.iter().all(|s| s.domain.is_hazy()));
    let t = pert.find_mut("E_C.block1.conv1.weight").unwrap();
    t.data_mut()[0] += 5.0;
    assert_eq!(extract_embeddings(&pert, &samples).unwrap(), base);
}

#[test]
fn extraction_rejects_bad_inputs() {
    let data = corpus();
    let m = models(0);
    let train = data.samples.iter().find(|s| s.split == Split::Train).unwrap();
    assert!(extract_embeddings(&m, &[train]).is_err());
    let mut big = eval_samples(data)[0].clone();
    big.image = Tensor::zeros(&[3, 32, 32]);
    assert!(matches!(extract_embeddings(&m, &[&big]), Err(Error::Shape { .. })));
}

fn set_of(rows: &[Vec<f64>], ids: &[u64], roles: &[Role]) -> EmbeddingSet {
    let d = rows[0].len();
    let data = rows.iter().flatten().copied().collect();
    EmbeddingSet::new(Tensor::new(vec![rows.len(), d], data).unwrap(), ids.to_vec(), roles.to_vec()).unwrap()
}

#[test]
fn distance_examples() {
    use Role::*;
    let d = 6;
    let s = set_of(&[vec![0.0; d], vec![1.0; d], vec![0.0; d]], &[0, 1, 0], &[Probe, Gallery, Gallery]);
    let m = distance_matrix(&s).unwrap();
    assert_eq!(m.shape(), [1, 2]);
    assert!((m.data()[0] - (d as f64).sqrt()).abs() < 1e-15);
    assert_eq!(m.data()[1], 0.0);
    let only = set_of(&[vec![0.0; d]], &[0], &[Probe]);
    assert!(distance_matrix(&only).is_err());
    assert!(EmbeddingSet::new(Tensor::zeros(&[2, 3]), vec![0], vec![Probe, Gallery]).is_err());
}

#[test]
fn distance_matches_hand_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let roles: Vec<Role> = (0..12).map(|i| if i % 2 == 0 && i < 10 { Role::Probe } else { Role::Gallery }).collect();
    let s = set_of(&rows, &(0..12).collect::<Vec<_>>(), &roles);
    let m = distance_matrix(&s).unwrap();
    assert_eq!(m.shape(), [5, 7]);
    let (mut pi, probes, gallery) = (0, s.rows(Role::Probe), s.rows(Role::Gallery));
    for &p in &probes {
        for (gi, &g) in gallery.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..5 {
                acc += (rows[p][k] - rows[g][k]).powi(2);
            }
            assert!((m.data()[pi * 7 + gi] - acc.sqrt()).abs() < 1e-12);
        }
        pi += 1;
    }
}

/// AP straight from the definition: mean over relevant positions of the
/// precision of the prefix ending there.
fn ap_oracle(flags: &[bool]) -> Option<f64> {
    let rel: Vec<usize> = (0..flags.len()).filter(|&k| flags[k]).collect();
    if rel.is_empty() {
        return None;
    }
    let prec = |k: usize| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64;
    Some(rel.iter().map(|&k| prec(k)).sum::<f64>() / rel.len() as f64)
}

#[test]
fn ap_matches_definition_exhaustively() {
    for len in 1..=8 {
        for bits in 0u32..(1 << len) {
            let flags: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
            match (average_precision(&flags), ap_oracle(&flags)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-15),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
}

/// Sort by distance then gallery position, apply the definitions.
fn evaluate_oracle(set: &EmbeddingSet, ranks: &[usize]) -> (f64, Vec<f64>, usize) {
    let probes = set.rows(Role::Probe);
    let gallery = set.rows(Role::Gallery);
    let dist = |a: usize, b: usize| {
        set.row(a).iter().zip(set.row(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let (mut aps, mut hits, mut excluded) = (Vec::new(), vec![0.0; ranks.len()], 0);
    for &p in &probes {
        let mut order: Vec<(f64, usize)> = gallery.iter().enumerate().map(|(j, &g)| (dist(p, g), j)).collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let flags: Vec<bool> = order.iter().map(|&(_, j)| set.ids[gallery[j]] == set.ids[p]).collect();
        match ap_oracle(&flags) {
            None => excluded += 1,
            Some(ap) => {
                aps.push(ap);
                for (h, &r) in hits.iter_mut().zip(ranks) {
                    if flags.iter().take(r).any(|&f| f) {
                        *h += 1.0;
                    }
                }
            }
        }
    }
    let n = aps.len().max(1) as f64;
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    (map, hits.iter().map(|h| h / n).collect(), excluded)
}

fn random_set(rng: &mut ChaCha8Rng, n_probe: usize, n_gallery: usize, dim: usize, quantize: bool) -> EmbeddingSet {
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut roles = Vec::new();
    for i in 0..n_probe {
        ids.push(i as u64);
        roles.push(Role::Probe);
    }
    for _ in 0..n_gallery {
        ids.push(rng.gen_range(0..n_probe as u64 + 1));
        roles.push(Role::Gallery);
    }
    for _ in 0..ids.len() {
        rows.push(
            (0..dim)
                .map(|_| if quantize { rng.gen_range(0..3) as f64 } else { rng.gen_range(-1.0..1.0) })
                .collect(),
        );
    }
    set_of(&rows, &ids, &roles)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn evaluate_matches_brute_force(seed in 0u64..10_000, np in 1usize..5, ng in 1usize..=8, quantize: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // quantized embeddings produce distance ties
        let set = random_set(&mut rng, np, ng, 3, quantize);
        let ranks = vec![1, 2, 5, 8];
        let cfg = EvalConfig { ranks: ranks.clone(), export_ranking: true };
        let rep = evaluate(&set, &cfg).unwrap();
        let (map, cmc, excluded) = evaluate_oracle(&set, &ranks);
        prop_assert!((rep.map - map).abs() < 1e-12);
        prop_assert_eq!(rep.excluded_probes, excluded);
        for (r, c) in ranks.iter().zip(&cmc) {
            prop_assert!((rep.cmc[r] - c).abs() < 1e-12);
        }
        prop_assert!(rep.cmc_curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&rep.map) && *rep.cmc_curve.last().unwrap() <= 1.0);
        let ranking = rep.ranking.unwrap();
        prop_assert_eq!(ranking.len(), np);
        prop_assert!(ranking.iter().all(|r| r.gallery.len() == ng));
    }

    #[test]
    fn metrics_survive_orthogonal_maps(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let set = random_set(&mut rng, 4, 8, d, false);
        let q = random_orthogonal(d, &mut rng);
        let mut rot = set.clone();
        for i in 0..set.len() {
            let x = set.row(i);
            let y: Vec<f64> = (0..d).map(|r| (0..d).map(|c| q[r][c] * x[c]).sum()).collect();
            rot.embeddings.data_mut()[i * d..(i + 1) * d].copy_from_slice(&y);
        }
        let cfg = EvalConfig::default();
        let (a, b) = (evaluate(&set, &cfg).unwrap(), evaluate(&rot, &cfg).unwrap());
        prop_assert!((a.map - b.map).abs() < 1e-9);
        for (x, y) in a.cmc_curve.iter().zip(&b.cmc_curve) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

/// Gram-Schmidt on a random Gaussian-ish matrix.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

#[test]
fn two_item_gallery_averages_three_quarters() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 4000;
    let mut total = 0.0;
    for _ in 0..trials {
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let set = set_of(&rows, &[0, 0, 1], &[Role::Probe, Role::Gallery, Role::Gallery]);
        total += evaluate(&set, &EvalConfig::default()).unwrap().map;
    }
    let mean = total / trials as f64;
    assert!((mean - 0.75).abs() < 0.05, "{mean}");
}

#[test]
fn exact_duplicates_are_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut roles = Vec::new();
    for id in 0..6u64 {
        let r: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        rows.push(r.clone());
        ids.push(id);
        roles.push(Role::Probe);
        rows.push(r);
        ids.push(id);
        roles.push(Role::Gallery);
    }
    let rep = evaluate(&set_of(&rows, &ids, &roles), &EvalConfig::default()).unwrap();
    assert_eq!(rep.map, 1.0);
    assert_eq!(rep.cmc[&1], 1.0);
    assert_eq!(rep.excluded_probes, 0);
}

#[test]
fn no_match_probe_is_excluded_and_counted() {
    use Role::*;
    let s = set_of(&[vec![0.0], vec![1.0], vec![0.1], vec![3.0]], &[0, 1, 0, 2], &[Probe, Probe, Gallery, Gallery]);
    let rep = evaluate(&s, &EvalConfig::default()).unwrap();
    assert_eq!(rep.excluded_probes, 1);
    assert_eq!(rep.map, 1.0);
}

#[test]
fn protocol_violations_are_rejected() {
    use Role::*;
    let s = set_of(&[vec![0.0], vec![1.0], vec![0.1]], &[0, 0, 0], &[Probe, Probe, Gallery]);
    assert!(matches!(evaluate(&s, &EvalConfig::default()), Err(Error::Protocol(_))));
    let bad = EvalConfig { ranks: vec![0], ..EvalConfig::default() };
    let ok = set_of(&[vec![0.0], vec![0.1]], &[0, 0], &[Probe, Gallery]);
    assert!(evaluate(&ok, &bad).is_err());

    let mut data = corpus().clone();
    let m = models(0);
    assert!(evaluate_dataset(&m, &data, true, &EvalConfig::default()).is_ok());
    let r = data.manifest.records.iter_mut().find(|r| r.domain.is_real() && r.split == Split::Gallery).unwrap();
    r.split = Split::Probe;
    assert!(matches!(evaluate_dataset(&m, &data, true, &EvalConfig::default()), Err(Error::Protocol(_))));
}

#[test]
fn report_serializes_with_string_rank_keys() {
    let set = set_of(&[vec![0.0], vec![0.1]], &[0, 0], &[Role::Probe, Role::Gallery]);
    let rep = evaluate(&set, &EvalConfig::default()).unwrap();
    let v = serde_json::to_value(&rep).unwrap();
    assert_eq!(v["mAP"], 1.0);
    assert_eq!(v["cmc"]["5"], 1.0);
    assert!(v.get("ranking").is_none());
    let back: EvalReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, rep);
}
