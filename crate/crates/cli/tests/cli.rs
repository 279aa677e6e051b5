use std::path::Path;
use std::process::{Command, Output};

use rvsl::data::codec;
use rvsl::Tensor;

const TINY: &str = r#"{
  "data": {"image_size": 16, "syn_identities": 8, "syn_eval_identities": 2,
           "real_identities": 8, "real_eval_identities": 2, "views_per_identity": 4},
  "net": {"image_size": 16, "base_channels": 4, "embedding_dim": 8, "discriminator_channels": 4},
  "train": {"epochs": 2, "iters_per_epoch": 2, "p": 2, "k": 2, "warmup_epochs": 1}
}"#;

fn rvsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvsl")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let cfg = tiny_config(dir);
    let data = dir.join("data");
    let o = rvsl(&["synth", "--config", s(&cfg), "--out", s(&data), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

#[test]
fn synth_train_eval_dehaze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = synth(dir.path());
    assert!(data.join("manifest.jsonl").exists());

    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = rvsl(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let a = run("a");
    let b = run("b");
    let bytes = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(bytes(&a, "model.ckpt"), bytes(&b, "model.ckpt"));
    assert_eq!(bytes(&a, "config.resolved.json"), bytes(&b, "config.resolved.json"));
    assert_eq!(std::fs::read_to_string(a.join("train_log.jsonl")).unwrap().lines().count(), 12);

    let ckpt = a.join("model.ckpt");
    let report = dir.path().join("report.json");
    let o = rvsl(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let map = rep["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert!(rep["cmc"]["1"].is_number());

    let hazy = data.join("real_hazy/8/1.png");
    assert!(hazy.exists(), "expected a real hazy view at {}", hazy.display());
    let clear = dir.path().join("clear.png");
    let o = rvsl(&["dehaze", "--ckpt", s(&ckpt), "--image", s(&hazy), "--out", s(&clear)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(codec::read_rgb(&clear).unwrap().shape(), &[3, 16, 16]);
}

#[test]
fn bad_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train":{"margin":-1}}"#).unwrap();
    let o = rvsl(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: config:") && err.contains("train.margin"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(rvsl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(rvsl(&["render", "--beta", "1"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_rvsl")).arg("gradcheck").env("RVSL_THREADS", "many").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("none.png");
    let o = rvsl(&["render", "--image", s(&p), "--depth", s(&p), "--beta", "1", "--airlight", "0.8", "--out", s(&p)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn eval_rejects_two_probes_per_identity() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = rvsl(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let manifest = data.join("manifest.jsonl");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut done = false;
    let lines: Vec<String> = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            if !done && v["domain"] == "real_hazy" && v["split"] == "gallery" {
                v["split"] = "probe".into();
                done = true;
            }
            serde_json::to_string(&v).unwrap()
        })
        .collect();
    assert!(done);
    std::fs::write(&manifest, lines.join("\n") + "\n").unwrap();

    let report = dir.path().join("r.json");
    let o = rvsl(&["eval", "--ckpt", s(&out.join("model.ckpt")), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: protocol:"), "{}", stderr(&o));
    assert!(!report.exists());
}

#[test]
fn render_with_zero_beta_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0);
    let depth = Tensor::from_fn(&[5, 7], |i| (i % 11) as f64 / 10.0);
    let (ip, dp, op) = (dir.path().join("i.png"), dir.path().join("d.png"), dir.path().join("o.png"));
    codec::write_rgb(&ip, &img).unwrap();
    codec::write_depth(&dp, &depth).unwrap();
    let o = rvsl(&["render", "--image", s(&ip), "--depth", s(&dp), "--beta", "0", "--airlight", "0.9,0.8,0.7", "--out", s(&op)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(codec::read_rgb(&op).unwrap(), codec::read_rgb(&ip).unwrap());

    let o = rvsl(&["render", "--image", s(&ip), "--depth", s(&dp), "--beta", "2", "--airlight", "1", "--out", s(&op)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hazy = codec::read_rgb(&op).unwrap();
    assert!(hazy.data().iter().zip(img.data()).all(|(h, c)| *h >= *c - 1e-9));
}

#[test]
fn gradcheck_passes() {
    let o = rvsl(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.contains("path") && l.starts_with("ok")));
    assert!(!out.contains("FAIL"));
}

#[test]
fn ablate_rows_match_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = synth(dir.path());
    let out = dir.path().join("abl");
    let o = rvsl(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--seeds", "0,1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    for v in ["syn", "syn+rc", "syn+rh", "full", "full-cr-midc", "full-dc-tv"] {
        assert!(table.contains(&format!("| {v} |")), "{v}");
    }
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 12);
    let full1 = rows.as_array().unwrap().iter().find(|r| r["variant"] == "full" && r["seed"] == 1).unwrap();

    let mut single: serde_json::Value = serde_json::from_str(TINY).unwrap();
    single["train"]["seed"] = 1.into();
    let single_cfg = dir.path().join("single.json");
    std::fs::write(&single_cfg, single.to_string()).unwrap();
    let run = dir.path().join("single");
    let o = rvsl(&["train", "--config", s(&single_cfg), "--data", s(&data), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = dir.path().join("single.json.report");
    let o = rvsl(&["eval", "--ckpt", s(&run.join("model.ckpt")), "--data", s(&data), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep, full1["real"]);
}
