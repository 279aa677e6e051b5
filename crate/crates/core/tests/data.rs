use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rvsl::data::codec;
use rvsl::data::render::{render_instance, rgb_to_hue, view_index, RenderConfig};
use rvsl::data::*;
use rvsl::haze::{self, DarkChannelConfig};
use rvsl::{Error, Tensor};

fn small_cfg() -> DataConfig {
    DataConfig {
        image_size: 32,
        syn_identities: 12,
        syn_eval_identities: 4,
        real_identities: 8,
        real_eval_identities: 4,
        views_per_identity: 4,
        ..DataConfig::default()
    }
}

#[test]
fn identity_generation_is_deterministic_and_diverse() {
    let a = generate_identity(5, &mut stream_rng(1, Purpose::Identity, 5));
    let b = generate_identity(5, &mut stream_rng(1, Purpose::Identity, 5));
    assert_eq!(a, b);
    let mut taken = BTreeSet::new();
    let ids = generate_identities(3, 0..1000, &mut taken);
    assert_eq!(ids.iter().map(|i| i.id).collect::<Vec<_>>(), (0..1000).collect::<Vec<_>>());
    let unique: BTreeSet<_> = ids.iter().map(|i| i.signature()).collect();
    assert!(unique.len() >= 995, "{}", unique.len());
}

#[test]
fn zero_jitter_render_is_reproducible() {
    let ident = generate_identity(0, &mut stream_rng(2, Purpose::Identity, 0));
    let cfg = RenderConfig { size: 32, jitter: 0.0 };
    let a = render_instance(&ident, &mut stream_rng(2, Purpose::View, 0), &cfg);
    let b = render_instance(&ident, &mut stream_rng(99, Purpose::View, 7), &cfg);
    assert_eq!(a.image, b.image);
    assert_eq!(a.depth, b.depth);
}

#[test]
fn vehicle_is_nearer_than_background() {
    let cfg = RenderConfig { size: 48, jitter: 1.0 };
    for id in 0..20 {
        let ident = generate_identity(id, &mut stream_rng(4, Purpose::Identity, id));
        let r = render_instance(&ident, &mut stream_rng(4, Purpose::View, view_index(id, 0)), &cfg);
        let d = r.depth.data();
        let veh = r.mask.iter().zip(d).filter(|(m, _)| **m > 0).map(|(_, d)| *d).fold(0.0, f64::max);
        let bg = r.mask.iter().zip(d).filter(|(m, _)| **m == 0).map(|(_, d)| *d).fold(1.0, f64::min);
        assert!(r.mask.iter().any(|&m| m > 0));
        assert!(veh < bg, "vehicle {veh} background {bg}");
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn views_share_body_hue() {
    let cfg = RenderConfig { size: 48, jitter: 1.0 };
    for id in 0..10 {
        let ident = generate_identity(id, &mut stream_rng(6, Purpose::Identity, id));
        let hues: Vec<f64> = (0..6)
            .map(|v| {
                let r = render_instance(&ident, &mut stream_rng(6, Purpose::View, view_index(id, v)), &cfg);
                let hw = 48 * 48;
                let p = r.mask.iter().position(|&m| m == 1).expect("visible body paint");
                rgb_to_hue([r.image.data()[p], r.image.data()[hw + p], r.image.data()[2 * hw + p]])
            })
            .collect();
        for h in &hues {
            let d = (h - hues[0]).abs();
            assert!(d.min(1.0 - d) <= 0.02, "{hues:?}");
        }
    }
}

#[test]
fn default_desk_generation_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig::default();
    let m = generate_dataset(&cfg, 7, dir.path()).unwrap();
    let by_id = m.by_identity();
    assert_eq!(by_id.len(), 180);
    let count = |d: Domain| m.records.iter().filter(|r| r.domain == d).count();
    assert_eq!(count(Domain::SynHazy), 120 * 8);
    assert_eq!(count(Domain::SynClear), 100 * 8);
    assert_eq!(count(Domain::RealClear) + count(Domain::RealHazy), 60 * 8);
    for r in &m.records {
        assert!(dir.path().join(&r.path).exists(), "{}", r.path);
        if r.domain == Domain::SynHazy {
            let b = r.beta.unwrap();
            assert!((0.4..=1.6).contains(&b));
            let a = r.airlight.unwrap();
            assert!(a[0] == a[1] && a[1] == a[2] && (0.5..=1.0).contains(&a[0]));
        }
    }
    let syn: BTreeSet<u64> = m.records.iter().filter(|r| !r.domain.is_real()).map(|r| r.id).collect();
    let real: BTreeSet<u64> = m.records.iter().filter(|r| r.domain.is_real()).map(|r| r.id).collect();
    assert!(syn.is_disjoint(&real));
    // manifest on disk matches
    assert_eq!(Manifest::read(&dir.path().join("manifest.jsonl")).unwrap(), m);
}

#[test]
fn generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_cfg();
    let ma = generate_dataset(&cfg, 3, a.path()).unwrap();
    let mb = generate_dataset(&cfg, 3, b.path()).unwrap();
    assert_eq!(ma, mb);
    for r in &ma.records {
        assert_eq!(std::fs::read(a.path().join(&r.path)).unwrap(), std::fs::read(b.path().join(&r.path)).unwrap());
    }
}

#[test]
fn overlapping_identity_ranges_are_rejected() {
    let cfg = DataConfig { real_id_offset: Some(5), ..small_cfg() };
    let dir = tempfile::tempdir().unwrap();
    let err = generate_dataset(&cfg, 0, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config { ref path, .. } if path == "data.real_id_offset"), "{err}");
}

#[test]
fn paired_consistency_and_codec_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small_cfg(), 11, dir.path()).unwrap();
    for r in m.records.iter().filter(|r| r.domain == Domain::SynHazy) {
        let hazy = codec::read_rgb(&dir.path().join(&r.path)).unwrap();
        let pair = codec::read_rgb(&dir.path().join(r.pair_path().unwrap())).unwrap();
        let depth = codec::read_depth(&dir.path().join(r.depth_path().unwrap())).unwrap();
        let hp = r.haze().unwrap();
        let t = haze::transmission_from_depth(&depth, hp.beta).unwrap();
        let re = haze::synthesize_haze(&pair, &t, &hp).unwrap();
        let err = re.zip_map(&hazy, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(err <= 1.0 / 255.0, "{} {err}", r.path);
        let back = codec::decode_rgb(&codec::encode_rgb(&hazy).unwrap()).unwrap();
        assert_eq!(back, hazy);
    }
}

#[test]
fn real_haze_is_denser_than_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig { image_size: 32, ..DataConfig::default() };
    generate_dataset(&cfg, 2, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let mean_dc = |d: Domain| {
        let idx = ds.indices(d, Split::Train);
        let total: f64 = idx
            .iter()
            .map(|&i| haze::dark_channel(&ds.samples[i].image, &DarkChannelConfig::default()).unwrap().mean())
            .sum();
        total / idx.len() as f64
    };
    let (real, syn) = (mean_dc(Domain::RealHazy), mean_dc(Domain::SynHazy));
    assert!(real > syn, "real {real} syn {syn}");
}

#[test]
fn probe_gallery_split() {
    let mut records = Vec::new();
    for id in 0..10u64 {
        for v in 0..4 {
            records.push(Record {
                id,
                path: format!("real_hazy/{id}/{v}.png"),
                domain: Domain::RealHazy,
                split: Split::Gallery,
                beta: Some(1.0),
                airlight: Some([0.8; 3]),
            });
        }
    }
    records.push(Record { id: 50, path: "real_clear/50/0.png".into(), domain: Domain::RealClear, split: Split::Train, beta: None, airlight: None });
    let m = Manifest { records };
    let ids: Vec<u64> = (0..10).collect();
    let s = split_probe_gallery(&m, &ids, 4).unwrap();
    let probes: Vec<&Record> = s.records.iter().filter(|r| r.split == Split::Probe).collect();
    let gallery: Vec<&Record> = s.records.iter().filter(|r| r.split == Split::Gallery).collect();
    assert_eq!(probes.len(), 10);
    assert_eq!(gallery.len(), 30);
    let pp: BTreeSet<&str> = probes.iter().map(|r| r.path.as_str()).collect();
    assert!(gallery.iter().all(|r| !pp.contains(r.path.as_str())));
    assert_eq!(s.records.last().unwrap().split, Split::Train);
    assert_eq!(split_probe_gallery(&m, &ids, 4).unwrap(), s);
    let all: Vec<&Record> = s.records.iter().collect();
    check_protocol(&all).unwrap();

    let mut bad = m.clone();
    bad.records.retain(|r| !(r.id == 3 && r.path != "real_hazy/3/0.png"));
    match split_probe_gallery(&bad, &ids, 4).unwrap_err() {
        Error::Protocol(msg) => assert!(msg.contains("[3]"), "{msg}"),
        e => panic!("{e}"),
    }
}

#[test]
fn generated_splits_follow_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let m = generate_dataset(&cfg, 5, dir.path()).unwrap();
    let all: Vec<&Record> = m.records.iter().collect();
    check_protocol(&all).unwrap();
    let mut per: BTreeMap<u64, usize> = BTreeMap::new();
    for r in m.records.iter().filter(|r| r.split == Split::Probe) {
        assert!(r.domain.is_hazy());
        *per.entry(r.id).or_default() += 1;
    }
    let eval: BTreeSet<u64> = cfg.syn_eval_ids().chain(cfg.real_eval_ids()).collect();
    assert_eq!(per.keys().copied().collect::<BTreeSet<_>>(), eval);
    assert!(per.values().all(|&n| n == 1));
    // train identities never appear in eval splits
    for r in &m.records {
        assert_eq!(r.split == Split::Train, !eval.contains(&r.id));
    }
}

#[test]
fn pk_sampler_and_augment() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small_cfg(), 8, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let pool = ds.indices(Domain::SynHazy, Split::Train);
    let sampler = PkSampler::new(&ds.samples, &pool).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = sampler.sample(4, 3, &mut rng);
    assert_eq!(batch.len(), 12);
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &i in &batch {
        *counts.entry(ds.samples[i].identity).or_default() += 1;
        assert!(ds.samples[i].pair.is_some());
    }
    assert_eq!(counts.len(), 4);
    assert!(counts.values().all(|&c| c == 3));

    let s = &ds.samples[batch[0]];
    let out = augment(&[&s.image, s.pair.as_ref().unwrap()], &Augment::default(), &mut rng);
    assert_eq!(out[0].shape(), s.image.shape());
    let off = augment(&[&s.image], &Augment { enabled: false, ..Augment::default() }, &mut rng);
    assert_eq!(off[0], s.image);
    // flip only, no crop: reversing twice is the identity
    let flip = Augment { enabled: true, pad: 0, flip_prob: 1.0 };
    let once = augment(&[&s.image], &flip, &mut rng).remove(0);
    let twice = augment(&[&once], &flip, &mut rng).remove(0);
    assert_eq!(twice, s.image);
    assert_ne!(once, s.image);
    let _ = Tensor::stack(&out).unwrap();
}
