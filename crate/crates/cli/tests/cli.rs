use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn modetr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modetr"))
        .args(args)
        .output()
        .expect("spawn modetr")
}

fn ok(args: &[&str]) -> Output {
    let out = modetr(args);
    assert!(
        out.status.success(),
        "modetr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// A small model so CLI round trips stay fast.
const TINY_CONFIG: &str = r#"{
    "model": {"variant": "VARIANT", "height": 32, "width": 32, "d_model": 16, "heads": 2,
              "enc_layers": 1, "dec_layers": 2, "ff_dim": 32, "num_queries": 6},
    "steps": STEPS, "batch_size": 2, "seed": 3
}"#;

fn tiny_config(dir: &Path, variant: &str, steps: usize) -> PathBuf {
    let text = TINY_CONFIG.replace("VARIANT", variant).replace("STEPS", &steps.to_string());
    write(dir, &format!("{variant}_{steps}.json"), &text)
}

fn tiny_dataset(dir: &Path, name: &str, count: usize) -> PathBuf {
    let spec = write(dir, "tiny_spec.json", r#"{"height": 32, "width": 32, "objects": {"min": 1, "max": 3}}"#);
    let out = dir.join(name);
    ok(&["generate", "--spec", path(&spec), "--out", path(&out), "--count", &count.to_string(), "--seed", "5"]);
    out
}

#[test]
fn generate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate", "--out", path(d), "--count", "8", "--seed", "11", "--ego-motion"]);
    }
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert_eq!(ca.len(), 1 + 8 * 3);
    assert_eq!(ca, cb);
}

#[test]
fn generate_zero_samples_gives_empty_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("empty");
    ok(&["generate", "--out", path(&out), "--count", "0"]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 0);
    assert_eq!(manifest["format_version"], 1);
}

#[test]
fn invalid_spec_exits_two_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x");
    for (text, field) in [(r#"{"static_fraction": 2.0}"#, "static_fraction"), (r#"{"colour": 1}"#, "colour")] {
        let spec = write(tmp.path(), "spec.json", text);
        let res = modetr(&["generate", "--spec", path(&spec), "--out", path(&out), "--count", "2"]);
        assert_eq!(res.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&res.stderr).contains(field));
        assert!(!out.exists());
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(modetr(&["train"]).status.code(), Some(2));
    assert_eq!(modetr(&["bogus"]).status.code(), Some(2));
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"model": {"d_modle": 8}}"#);
    let data = tiny_dataset(tmp.path(), "d", 1);
    let out = tmp.path().join("m.ckpt");
    let res = modetr(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("d_modle"));
}

#[test]
fn train_logs_and_resume_round_trips() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path(), "d", 4);
    let cfg = tiny_config(tmp.path(), "early_tpe", 3);
    let first = tmp.path().join("a.ckpt");
    let out = ok(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&first)]);
    let log = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,total,loss_cls,loss_l1,loss_giou");
    assert_eq!(lines.len(), 4);
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], (i + 1).to_string());
        assert!(fields[1..].iter().all(|f| f.parse::<f64>().unwrap().is_finite()));
    }

    let again = tmp.path().join("b.ckpt");
    ok(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&again), "--resume", path(&first)]);
    assert_eq!(fs::read(&first).unwrap(), fs::read(&again).unwrap());

    // Resuming to a later step matches an uninterrupted run.
    let cfg5 = tiny_config(tmp.path(), "early_tpe", 5);
    let resumed = tmp.path().join("c.ckpt");
    let straight = tmp.path().join("d.ckpt");
    ok(&["train", "--config", path(&cfg5), "--data", path(&data), "--out", path(&resumed), "--resume", path(&first)]);
    ok(&["train", "--config", path(&cfg5), "--data", path(&data), "--out", path(&straight)]);
    assert_eq!(fs::read(&resumed).unwrap(), fs::read(&straight).unwrap());
}

#[test]
fn flow_variant_rejects_flowless_data() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path(), "d", 2);
    let manifest_path = data.join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    for s in manifest["samples"].as_array_mut().unwrap() {
        s.as_object_mut().unwrap().remove("flow");
    }
    fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let cfg = tiny_config(tmp.path(), "rgb_of", 2);
    let out = tmp.path().join("m.ckpt");
    let res = modetr(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("flow"));
    assert!(res.stdout.is_empty(), "no training output before the check");
    assert!(!out.exists());
}

#[test]
fn eval_is_deterministic_and_perfect_detections_score_one() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path(), "d", 3);
    let cfg = tiny_config(tmp.path(), "baseline", 1);
    let ckpt = tmp.path().join("m.ckpt");
    ok(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&ckpt)]);
    let (ra, rb) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    for r in [&ra, &rb] {
        ok(&["eval", "--ckpt", path(&ckpt), "--data", path(&data), "--out", path(r)]);
    }
    assert_eq!(fs::read(&ra).unwrap(), fs::read(&rb).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&ra).unwrap()).unwrap();
    for class in ["moving", "static", "mean"] {
        for key in ["map_total", "map50", "map75"] {
            let v = report[class][key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert!(report["moving"]["map50"].as_f64().unwrap() < 0.5);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    let oracle: Vec<Vec<serde_json::Value>> = manifest["samples"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            s["objects"]
                .as_array()
                .unwrap()
                .iter()
                .map(|o| {
                    let mut d = o.clone();
                    d["score"] = serde_json::json!(0.9);
                    d
                })
                .collect()
        })
        .collect();
    let dets = write(tmp.path(), "dets.json", &serde_json::to_string(&oracle).unwrap());
    let perfect = tmp.path().join("p.json");
    ok(&["eval", "--detections", path(&dets), "--data", path(&data), "--out", path(&perfect)]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&perfect).unwrap()).unwrap();
    for class in ["moving", "static", "mean"] {
        for key in ["map_total", "map50", "map75"] {
            assert_eq!(report[class][key].as_f64().unwrap(), 1.0, "{class}.{key}");
        }
    }
}

fn export_files(tmp: &Path, variant: &str, data: &Path) -> Vec<String> {
    let cfg = tiny_config(tmp, variant, 1);
    let ckpt = tmp.join(format!("{variant}.ckpt"));
    ok(&["train", "--config", path(&cfg), "--data", path(data), "--out", path(&ckpt)]);
    let out = tmp.join(format!("{variant}_maps"));
    ok(&["export-attention", "--ckpt", path(&ckpt), "--data", path(data), "--sample", "1", "--out", path(&out)]);
    let mut names: Vec<String> = dir_contents(&out).into_iter().map(|(n, _)| n).collect();
    names.sort();
    names
}

#[test]
fn attention_export_file_contract() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path(), "d", 2);
    // Tiny config: 2 decoder layers, 6 queries.
    let base = export_files(tmp.path(), "baseline", &data);
    assert_eq!(base.iter().filter(|n| n.ends_with(".pgm")).count(), 12);
    assert_eq!(base.iter().filter(|n| n.ends_with(".ppm")).count(), 1);
    let early = export_files(tmp.path(), "early_tpe", &data);
    assert_eq!(early.iter().filter(|n| n.ends_with("_t0.pgm")).count(), 12);
    assert_eq!(early.iter().filter(|n| n.ends_with("_t1.pgm")).count(), 12);
    assert_eq!(early.iter().filter(|n| n.ends_with(".ppm")).count(), 2);

    let pgm = fs::read(tmp.path().join("baseline_maps").join("layer1_query05.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm.len(), 11 + 16);
    let ppm = fs::read(tmp.path().join("baseline_maps").join("frame_t1.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(ppm.len(), 13 + 32 * 32 * 3);

    let cfg = tiny_config(tmp.path(), "baseline", 1);
    let ckpt = tmp.path().join("baseline.ckpt");
    ok(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&ckpt)]);
    let res = modetr(&["export-attention", "--ckpt", path(&ckpt), "--data", path(&data), "--sample", "9", "--out", path(&tmp.path().join("z"))]);
    assert_eq!(res.status.code(), Some(2));
}
