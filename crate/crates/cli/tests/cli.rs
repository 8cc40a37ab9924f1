use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elpower::imagecore::{load_pgm16, save_pgm16};
use elpower::synth::{synth_scene, ModuleStyle, SceneModule, SceneSpec};
use serde_json::Value;
use tempfile::TempDir;

fn elpower(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elpower"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = elpower(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn synth(dir: &Path, count: usize, noise: f64, seed: u64) -> PathBuf {
    ok(&[
        "synth",
        "--out",
        s(dir),
        "--count",
        &count.to_string(),
        "--noise",
        &noise.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    dir.join("manifest.jsonl")
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn cv_noiseless_and_noisy_area_estimator() {
    for (noise, bound) in [(0.0, 0.005), (0.02, 0.02 * 0.7979 * 1.2)] {
        let dir = TempDir::new().unwrap();
        let manifest = synth(dir.path(), 150, noise, 3);
        let out = dir.path().join("cv");
        let run = ok(&["cv", "--manifest", s(&manifest), "--out", s(&out), "--estimator", "area"]);
        let report = read_json(&out.join("report.json"));
        assert_eq!(report["format_version"], 1);
        assert_eq!(report["command"], "cv");
        assert_eq!(report["config"]["cv"]["k"], 5);
        let mae = report["report"]["overall"]["mae"].as_f64().unwrap();
        assert!(mae < bound, "noise {noise}: MAE {mae} >= {bound}");
        assert_eq!(csv_rows(&out.join("predictions.csv")).len(), 150);
        assert!(String::from_utf8_lossy(&run.stdout).contains("MAE"));
    }
}

#[test]
fn cv_rejects_more_folds_than_instances() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 4, 0.01, 1);
    let out = elpower(&["cv", "--manifest", s(&manifest), "--out", s(&dir.path().join("cv")), "--k", "50"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("instances"));
}

#[test]
fn cv_output_is_reproducible_across_worker_counts() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 60, 0.01, 5);
    let run = |jobs: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "cv",
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--estimator",
            "svr",
            "--hpo-budget",
            "8",
            "--jobs",
            jobs,
        ]);
        (
            fs::read(out.join("report.json")).unwrap(),
            fs::read(out.join("predictions.csv")).unwrap(),
        )
    };
    assert_eq!(run("1", "a"), run("4", "b"));
}

#[test]
fn generalization_mode_trains_and_tests_on_type_subsets() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 90, 0.01, 2);
    let out = dir.path().join("gen");
    ok(&[
        "cv",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--train-subset",
        "T1",
        "--test-subset",
        "T2,T3",
    ]);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["mode"], "train_test");
    let rows = csv_rows(&out.join("predictions.csv"));
    assert!(!rows.is_empty());
    let header = fs::read_to_string(out.join("predictions.csv")).unwrap();
    let type_col = header.lines().next().unwrap().split(',').position(|c| c == "module_type").unwrap();
    assert!(rows.iter().all(|r| r[type_col] != "T1"));
}

#[test]
fn external_predictions_are_scored_on_the_same_folds() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 60, 0.01, 4);
    let model = dir.path().join("area.json");
    ok(&["fit-svr", "--manifest", s(&manifest), "--out", s(&model), "--estimator", "area"]);
    let preds = dir.path().join("predictions.csv");
    ok(&["predict", "--manifest", s(&manifest), "--model", s(&model), "--out", s(&preds)]);
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().next(), Some("sample_id,p_rel_hat"));
    assert!(dir.path().join("predictions.csv.run.json").exists());

    let out = dir.path().join("ext");
    ok(&["cv", "--manifest", s(&manifest), "--out", s(&out), "--predictions", s(&preds)]);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["mode"], "external");
    assert!(report["report"]["overall"]["mae"].as_f64().unwrap() < 0.02);

    // a missing sample is invalid input
    let text = fs::read_to_string(&preds).unwrap();
    let truncated: Vec<&str> = text.lines().take(10).collect();
    fs::write(&preds, truncated.join("\n")).unwrap();
    let bad = elpower(&["cv", "--manifest", s(&manifest), "--out", s(&out), "--predictions", s(&preds)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn embedding_features_feed_the_svr_path() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 40, 0.01, 6);
    // an externally produced embedding file, independent of the images
    let mut csv = String::from("sample_id");
    for k in 0..8 {
        csv += &format!(",f{k}");
    }
    csv += "\n";
    for line in fs::read_to_string(&manifest).unwrap().lines() {
        let e: Value = serde_json::from_str(line).unwrap();
        let id = e["sample_id"].as_str().unwrap();
        let p = e["p_mpp"].as_f64().unwrap() / e["p_nom"].as_f64().unwrap();
        csv += id;
        for k in 0..8 {
            csv += &format!(",{}", p * (k as f64 + 1.0) + 0.01 * k as f64);
        }
        csv += "\n";
    }
    let emb = dir.path().join("embeddings.csv");
    fs::write(&emb, csv).unwrap();
    // images are not needed on this path
    fs::remove_dir_all(dir.path().join("modules")).unwrap();

    let model = dir.path().join("svr.json");
    ok(&[
        "fit-svr",
        "--manifest",
        s(&manifest),
        "--features",
        s(&emb),
        "--c",
        "10",
        "--epsilon",
        "0.001",
        "--out",
        s(&model),
    ]);
    assert_eq!(read_json(&model)["model"]["estimator"], "svr");
    let preds = dir.path().join("p.csv");
    ok(&["predict", "--manifest", s(&manifest), "--model", s(&model), "--features", s(&emb), "--out", s(&preds)]);
    let rows = csv_rows(&preds);
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn features_then_tune_svr() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 30, 0.01, 7);
    let feats = dir.path().join("features.csv");
    ok(&["features", "--manifest", s(&manifest), "--out", s(&feats)]);
    let text = fs::read_to_string(&feats).unwrap();
    assert_eq!(text.lines().next(), Some("sample_id,f0,f1"));
    assert_eq!(text.lines().count(), 31);

    let out = dir.path().join("tuned.json");
    ok(&["tune-svr", "--manifest", s(&manifest), "--hpo-budget", "5", "--out", s(&out)]);
    let tuned = read_json(&out);
    assert_eq!(tuned["search"]["trials"].as_array().unwrap().len(), 5);
    assert!(tuned["params"]["c"].as_f64().unwrap() > 0.0);
}

/// A measurement with three modules of known inactive fraction.
fn three_module_scene(dir: &Path) -> (PathBuf, Vec<f64>) {
    let fractions = vec![0.0, 0.1, 0.25];
    let spec = SceneSpec {
        width: 1400,
        height: 900,
        background: 200,
        noise_sigma: 20.0,
        style: ModuleStyle::default(),
        modules: fractions
            .iter()
            .enumerate()
            .map(|(i, &f)| SceneModule::axis_aligned(100.0 + 420.0 * i as f64, 100.0, 360.0, 600.0, f))
            .collect(),
        seed: 11,
    };
    let (img, boxes) = synth_scene(&spec).unwrap();
    assert_eq!(boxes.len(), 3);
    let path = dir.join("scene.pgm");
    save_pgm16(&img, &path).unwrap();
    (path, fractions)
}

#[test]
fn inspect_estimates_every_module_of_a_scene() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 120, 0.0, 8);
    let model = dir.path().join("area.json");
    ok(&["fit-svr", "--manifest", s(&manifest), "--out", s(&model), "--estimator", "area"]);
    let (scene, fractions) = three_module_scene(dir.path());

    let report = dir.path().join("inspect.json");
    ok(&["inspect", s(&scene), "--model", s(&model), "--p-nom", "230", "--out", s(&report)]);
    let report = read_json(&report);
    let modules = report["results"][0]["modules"].as_array().unwrap();
    assert_eq!(modules.len(), 3);
    let mut by_x: Vec<&Value> = modules.iter().collect();
    by_x.sort_by_key(|m| m["bbox"][0].as_u64().unwrap());
    for (m, f) in by_x.iter().zip(&fractions) {
        let p = m["estimate"]["p_rel_hat"].as_f64().unwrap();
        assert!((p - (1.0 - f)).abs() < 0.03, "fraction {f}: estimate {p}");
        assert!((m["estimate"]["p_mpp_hat"].as_f64().unwrap() - 230.0 * p).abs() < 1e-9);
        let cells = m["cell_loss_wp"].as_array().unwrap();
        assert_eq!(cells.len(), 60);
        let total: f64 = cells.iter().map(|c| c.as_f64().unwrap()).sum();
        assert!((total - 230.0 * (1.0 - p)).abs() < 1e-6);
    }
}

#[test]
fn inspect_flags_unreadable_images_and_accepts_empty_input() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 30, 0.0, 9);
    let model = dir.path().join("area.json");
    ok(&["fit-svr", "--manifest", s(&manifest), "--out", s(&model), "--estimator", "area"]);

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = ok(&["inspect", "--manifest", s(&empty), "--model", s(&model)]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["results"].as_array().unwrap().len(), 0);

    let (scene, _) = three_module_scene(dir.path());
    let missing = dir.path().join("missing.pgm");
    let out = elpower(&["inspect", s(&missing), s(&scene), "--model", s(&model), "--p-nom", "230"]);
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["results"][0]["error"].is_string());
    assert_eq!(report["results"][1]["modules"].as_array().unwrap().len(), 3);
}

#[test]
fn synth_scenes_detect_and_tune() {
    let dir = TempDir::new().unwrap();
    ok(&["synth", "--out", s(dir.path()), "--count", "3", "--scenes", "6", "--scene-size", "1024"]);
    let scenes = dir.path().join("scenes");
    let tuned = dir.path().join("tuned.json");
    let pr = dir.path().join("pr.csv");
    ok(&["tune-detect", s(&scenes), "--budget", "12", "--out", s(&tuned), "--pr-csv", s(&pr)]);
    let tuned = read_json(&tuned);
    assert_eq!(tuned["images"], 6);
    let scale = tuned["tuning"]["params"]["scale"].as_f64().unwrap();
    let ratio = tuned["tuning"]["params"]["min_area_ratio"].as_f64().unwrap();
    let rows = csv_rows(&pr);
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0][0], "0.5");

    let images: Vec<String> = (0..6).map(|k| s(&scenes.join(format!("scene_{k:03}.pgm"))).to_string()).collect();
    let mut args = vec!["detect", "--scale"];
    let (scale, ratio) = (scale.to_string(), ratio.to_string());
    args.extend([scale.as_str(), "--min-area-ratio", ratio.as_str()]);
    args.extend(images.iter().map(String::as_str));
    let out = ok(&args);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 6);
    for (r, img) in results.iter().zip(&images) {
        let gt = read_json(&Path::new(img).with_extension("json"));
        assert_eq!(r["boxes"].as_array().unwrap().len(), gt["boxes"].as_array().unwrap().len());
        assert_eq!(r["params"]["scale"].as_f64().unwrap().to_string(), scale);
    }
}

#[test]
fn rectify_with_a_given_box() {
    let dir = TempDir::new().unwrap();
    let (scene, _) = three_module_scene(dir.path());
    let out = dir.path().join("rect");
    ok(&["rectify", s(&scene), "--box", "80,80,480,720", "--cell-px", "50", "--out", s(&out)]);
    let img = load_pgm16(out.join("module_0.pgm")).unwrap();
    assert_eq!((img.width(), img.height()), (300, 500));
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["config"]["geometry"]["cell_px"], 50);
}

/// PLM bytes written without the library encoder.
fn plm(width: u32, height: u32, values: &[f64]) -> Vec<u8> {
    let mut b = b"PLM1".to_vec();
    b.extend(width.to_le_bytes());
    b.extend(height.to_le_bytes());
    for v in values {
        b.extend(v.to_le_bytes());
    }
    b
}

#[test]
fn cell_loss_from_external_maps() {
    let dir = TempDir::new().unwrap();
    let (w, h) = (60u32, 100u32);
    let n = (w * h) as usize;
    let uniform = dir.path().join("uniform.plm");
    fs::write(&uniform, plm(w, h, &vec![-0.06 / n as f64; n])).unwrap();
    let out = dir.path().join("cells.csv");
    ok(&["cell-loss", s(&uniform), "--p-nom", "230", "--out", s(&out)]);
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 60);
    for r in &rows {
        assert!((r[3].parse::<f64>().unwrap() - 0.23).abs() < 1e-9);
    }

    // debiasing against itself removes all loss
    let out2 = dir.path().join("debiased.csv");
    ok(&["cell-loss", s(&uniform), "--healthy", s(&uniform), "--p-nom", "230", "--out", s(&out2)]);
    assert!(csv_rows(&out2).iter().all(|r| r[3].parse::<f64>().unwrap().abs() < 1e-12));

    let bad = dir.path().join("bad.plm");
    fs::write(&bad, b"PLM0\x01\0\0\0\x01\0\0\0\0\0\0\0\0\0\0\0").unwrap();
    assert_eq!(elpower(&["cell-loss", s(&bad), "--p-nom", "230", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn cell_loss_from_area_model_conserves_power() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 30, 0.0, 10);
    let model = dir.path().join("area.json");
    ok(&["fit-svr", "--manifest", s(&manifest), "--out", s(&model), "--estimator", "area"]);
    let preds = dir.path().join("p.csv");
    ok(&["predict", "--manifest", s(&manifest), "--model", s(&model), "--out", s(&preds)]);
    let out = dir.path().join("cells.csv");
    ok(&["cell-loss", "--manifest", s(&manifest), "--model", s(&model), "--out", s(&out)]);
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 30 * 60);
    let p_nom = |line: &str| {
        let e: Value = serde_json::from_str(line).unwrap();
        (e["sample_id"].as_str().unwrap().to_string(), e["p_nom"].as_f64().unwrap())
    };
    let noms: std::collections::BTreeMap<_, _> = fs::read_to_string(&manifest).unwrap().lines().map(p_nom).collect();
    for pred in csv_rows(&preds) {
        let total: f64 = rows.iter().filter(|r| r[0] == pred[0]).map(|r| r[3].parse::<f64>().unwrap()).sum();
        let p: f64 = pred[1].parse().unwrap();
        assert!((total - noms[&pred[0]] * (1.0 - p).max(0.0)).abs() < 1e-9);
    }
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, "{ not json").unwrap();
    let manifest = synth(dir.path(), 5, 0.01, 1);
    let code = |args: &[&str]| elpower(args).status.code();
    assert_eq!(code(&["features", "--manifest", s(&manifest), "--out", "x.csv", "--config", s(&cfg)]), Some(2));
    assert_eq!(code(&["features", "--manifest", s(&manifest)]), Some(2));
    assert_eq!(code(&["detect", "--scale", "1.5", s(&dir.path().join("a.pgm"))]), Some(2));
    assert_eq!(code(&["no-such-command"]), Some(2));

    // a config file overrides defaults and is echoed in the output
    fs::write(&cfg, r#"{"cv": {"k": 3}}"#).unwrap();
    let out = dir.path().join("cv");
    let manifest = synth(&dir.path().join("m"), 40, 0.01, 1);
    ok(&["cv", "--manifest", s(&manifest), "--out", s(&out), "--config", s(&cfg)]);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["config"]["cv"]["k"], 3);
    assert_eq!(report["folds"]["k"], 3);
}
