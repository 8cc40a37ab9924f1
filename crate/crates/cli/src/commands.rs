//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use elpower::detect::{detect_modules, BoundingBox, DetectionParams};
use elpower::eval::{
    metrics_report, pr_curve, read_manifest, stratified_group_folds, tune_detection, write_manifest, CurrentLevel,
    ManifestEntry, PredictionRecord, Setting,
};
use elpower::imagecore::{load_pgm16, save_pgm16, Image16};
use elpower::pipeline::{
    cross_validate, fit_estimator, fit_svr_model, inspect_image, train_test, tune_svr, CvOutcome, Estimator,
    FittedModel, ModuleReport, Sample, TrainedModel,
};
use elpower::power::{cell_losses, debias_maps, load_loss_map, synth_loss_map, CellGrid, LossMap};
use elpower::rectify::{rectify_module, ModuleGeometry};
use elpower::regress::{read_feature_csv, write_feature_csv, FeatureVector, SvrParams};
use elpower::synth::{scene_corpus, synth_module};

use crate::config::{write_json, write_sidecar, RunConfig, SvrHyper};
use crate::{Cli, Command, Common, DetectArgs, GeometryArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Some items failed; the others were processed.
    Partial,
}

fn status(failures: usize) -> Status {
    if failures == 0 {
        Status::Success
    } else {
        Status::Partial
    }
}

pub fn run(cli: Cli) -> Result<Status> {
    let common = cli.common;
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.cv.seed = seed;
    }
    match cli.command {
        Command::Synth {
            count,
            noise,
            max_fraction,
            scenes,
            scene_size,
        } => synth(&cfg, &common, count, noise, max_fraction, scenes, scene_size),
        Command::Detect { images, params, pr_csv } => {
            apply_detection(&mut cfg, &params)?;
            detect(&cfg, &common, &images, pr_csv.as_deref())
        }
        Command::Rectify {
            image,
            bbox,
            params,
            geometry,
        } => {
            apply_detection(&mut cfg, &params)?;
            apply_geometry(&mut cfg, &geometry)?;
            rectify(&cfg, &common, &image, bbox)
        }
        Command::Features => features(&cfg, &common),
        Command::FitSvr {
            estimator,
            features,
            c,
            epsilon,
        } => {
            if let (Some(c), Some(epsilon)) = (c, epsilon) {
                cfg.svr = Some(SvrHyper { c, epsilon });
            }
            fit(&cfg, &common, estimator.into(), features.as_deref())
        }
        Command::Predict { model, features } => predict(&cfg, &common, &model, features.as_deref()),
        Command::Cv {
            estimator,
            k,
            hpo_budget,
            features,
            train_subset,
            test_subset,
            predictions,
        } => {
            if let Some(k) = k {
                cfg.cv.k = k;
            }
            if let Some(b) = hpo_budget {
                cfg.cv.hpo_budget = b;
            }
            let subsets = (!train_subset.is_empty()).then_some((train_subset, test_subset));
            cv(&cfg, &common, estimator.into(), features.as_deref(), subsets, predictions.as_deref())
        }
        Command::TuneDetect {
            corpus,
            budget,
            tau,
            pr_csv,
        } => tune_detect(&cfg, &common, &corpus, budget, tau, pr_csv.as_deref()),
        Command::TuneSvr { hpo_budget, features } => {
            if let Some(b) = hpo_budget {
                cfg.cv.hpo_budget = b;
            }
            tune(&cfg, &common, features.as_deref())
        }
        Command::CellLoss {
            maps,
            healthy,
            model,
            p_nom,
            geometry,
        } => {
            apply_geometry(&mut cfg, &geometry)?;
            cell_loss(&cfg, &common, &maps, &healthy, model.as_deref(), p_nom)
        }
        Command::Inspect {
            images,
            model,
            p_nom,
            params,
            geometry,
        } => {
            apply_detection(&mut cfg, &params)?;
            apply_geometry(&mut cfg, &geometry)?;
            inspect(&cfg, &common, &images, &model, p_nom)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn apply_detection(cfg: &mut RunConfig, args: &DetectArgs) -> Result<()> {
    if let Some(s) = args.scale {
        cfg.detection.scale = s;
    }
    if let Some(t) = args.min_area_ratio {
        cfg.detection.min_area_ratio = t;
    }
    cfg.detection.validate()?;
    Ok(())
}

fn apply_geometry(cfg: &mut RunConfig, args: &GeometryArgs) -> Result<()> {
    let g = cfg.geometry;
    cfg.geometry = ModuleGeometry::new(
        args.rows.unwrap_or(g.rows),
        args.cols.unwrap_or(g.cols),
        args.cell_px.unwrap_or(g.cell_px),
    )?;
    Ok(())
}

fn need_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
}

/// Manifest entries with image paths resolved against the manifest directory.
fn load_manifest(common: &Common) -> Result<Vec<ManifestEntry>> {
    let path = common.manifest.as_deref().ok_or_else(|| anyhow!("--manifest is required"))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))?;
    for e in &mut entries {
        let p = Path::new(&e.image_path);
        if p.is_relative() {
            e.image_path = base.join(p).to_string_lossy().into_owned();
        }
    }
    Ok(entries)
}

fn labeled(entries: Vec<ManifestEntry>) -> Vec<ManifestEntry> {
    let n = entries.len();
    let kept: Vec<ManifestEntry> = entries.into_iter().filter(|e| e.p_mpp.is_some()).collect();
    if kept.len() < n {
        log::warn!("skipping {} unlabeled entries", n - kept.len());
    }
    kept
}

fn read_features(path: &Path) -> Result<BTreeMap<String, FeatureVector>> {
    Ok(read_feature_csv(path)
        .with_context(|| format!("reading features {}", path.display()))?
        .into_iter()
        .collect())
}

/// Builds samples in manifest order. Images are read only when `need_images`;
/// otherwise the inactive fraction is NaN and `features` must cover every entry.
fn load_samples(
    entries: Vec<ManifestEntry>,
    cfg: &RunConfig,
    features: Option<&BTreeMap<String, FeatureVector>>,
    need_images: bool,
) -> Result<(Vec<Sample>, usize)> {
    if let Some(f) = features {
        if let Some(e) = entries.iter().find(|e| !f.contains_key(&e.sample_id)) {
            bail!("feature file has no row for {}", e.sample_id);
        }
    }
    let results: Vec<Result<Sample, String>> = entries
        .into_par_iter()
        .map(|entry| {
            let mut sample = if need_images {
                let img = load_pgm16(&entry.image_path).map_err(|e| format!("{}: {e}", entry.image_path))?;
                Sample::from_image(entry, &img, cfg.cv.inactive).map_err(|e| e.to_string())?
            } else {
                Sample {
                    features: FeatureVector(Vec::new()),
                    inactive_fraction: f64::NAN,
                    entry,
                }
            };
            if let Some(f) = features {
                sample.features = f[&sample.entry.sample_id].clone();
            }
            Ok(sample)
        })
        .collect();
    let mut samples = Vec::with_capacity(results.len());
    let mut failures = 0;
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::error!("{e}");
                failures += 1;
            }
        }
    }
    Ok((samples, failures))
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    #[derive(Deserialize)]
    struct ModelFile {
        model: TrainedModel,
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    let file: ModelFile = serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))?;
    Ok(file.model)
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    boxes: Vec<BoundingBox>,
}

fn annotation_path(image: &Path) -> PathBuf {
    image.with_extension("json")
}

fn read_annotation(image: &Path) -> Result<Vec<BoundingBox>> {
    let path = annotation_path(image);
    let text = fs::read_to_string(&path).with_context(|| format!("reading annotation {}", path.display()))?;
    let ann: Annotation = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(ann.boxes)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    create_parent(path)?;
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// Writes the JSON to `--out` when given, otherwise to stdout.
fn emit_json<T: Serialize>(common: &Common, command: &str, cfg: &RunConfig, body: &T) -> Result<()> {
    match &common.out {
        Some(path) => write_json(path, command, cfg, body),
        None => {
            let text = crate::config::to_json(command, cfg, body)?;
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// IoU thresholds of the PR curve: 0.50, 0.55, ..., 0.95.
fn pr_taus() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

fn write_pr_csv(path: &Path, pairs: &[(Vec<BoundingBox>, Vec<BoundingBox>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["tau", "precision", "recall", "f1"])?;
    for p in pr_curve(pairs, &pr_taus()) {
        w.serialize((p.tau, p.precision, p.recall, p.f1))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands

#[allow(clippy::too_many_arguments)]
fn synth(
    cfg: &RunConfig,
    common: &Common,
    count: usize,
    noise: f64,
    max_fraction: f64,
    scenes: usize,
    scene_size: usize,
) -> Result<Status> {
    let out = need_out(common)?;
    if !(0.0..1.0).contains(&max_fraction) || max_fraction == 0.0 {
        bail!("--max-fraction must lie in (0, 1)");
    }
    let noise_dist = Normal::new(0.0, noise).map_err(|e| anyhow!("--noise: {e}"))?;
    fs::create_dir_all(out.join("modules"))?;
    let style = cfg.style;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.cv.seed);
    let mut manifest = Vec::with_capacity(count);
    let mut truth = csv_writer(&out.join("truth.csv"))?;
    truth.write_record(["sample_id", "instance_id", "inactive_fraction"])?;
    let mut instance = 0;
    while manifest.len() < count {
        // most instances are measured once, some repeatedly
        let repeats = if rng.random_range(0..5) == 0 { rng.random_range(2..5) } else { 1 };
        let fraction = rng.random_range(0.0..max_fraction);
        let module_type = ["T1", "T2", "T3"][instance % 3];
        let p_nom = [230.0, 250.0, 245.0][instance % 3];
        for r in 0..repeats.min(count - manifest.len()) {
            let id = format!("s{:04}", manifest.len());
            let module = synth_module(&style, fraction, 40.0, rng.random())?;
            let rel = format!("modules/{id}.pgm");
            save_pgm16(&module.image, out.join(&rel))?;
            let p_rel = (1.0 - module.defect_fraction + noise_dist.sample(&mut rng)).clamp(0.0, 1.2);
            let instance_id = format!("inst{instance:04}");
            truth.serialize((&id, &instance_id, module.defect_fraction))?;
            manifest.push(ManifestEntry {
                sample_id: id,
                image_path: rel,
                module_type: module_type.to_string(),
                instance_id,
                p_nom,
                p_mpp: Some(p_rel * p_nom),
                current_level: if r % 2 == 0 { CurrentLevel::High } else { CurrentLevel::Low },
                setting: Setting::Indoor,
                rows: style.rows,
                cols: style.cols,
            });
        }
        instance += 1;
    }
    truth.flush()?;
    write_manifest(out.join("manifest.jsonl"), &manifest)?;
    if scenes > 0 {
        let dir = out.join("scenes");
        fs::create_dir_all(&dir)?;
        let corpus = scene_corpus(scenes, scene_size, (2, 7), &style, cfg.cv.seed)?;
        for (k, (img, boxes)) in corpus.iter().enumerate() {
            let path = dir.join(format!("scene_{k:03}.pgm"));
            save_pgm16(img, &path)?;
            fs::write(
                annotation_path(&path),
                serde_json::to_string(&Annotation { boxes: boxes.clone() })? + "\n",
            )?;
        }
    }
    write_json(
        &out.join("run.json"),
        "synth",
        cfg,
        &json!({ "samples": manifest.len(), "instances": instance, "scenes": scenes, "noise": noise }),
    )?;
    Ok(Status::Success)
}

#[derive(Serialize)]
struct DetectResult<'a> {
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<BoundingBox>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<&'a DetectionParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn detect(cfg: &RunConfig, common: &Common, images: &[PathBuf], pr_csv: Option<&Path>) -> Result<Status> {
    if images.is_empty() {
        log::warn!("no images given");
    }
    let outcomes: Vec<Result<Vec<BoundingBox>, String>> = images
        .par_iter()
        .map(|p| {
            let img = load_pgm16(p).map_err(|e| e.to_string())?;
            detect_modules(&img, &cfg.detection).map_err(|e| e.to_string())
        })
        .collect();
    let mut failures = 0;
    let mut results = Vec::with_capacity(images.len());
    let mut pairs = Vec::new();
    for (path, outcome) in images.iter().zip(outcomes) {
        let image = path.to_string_lossy().into_owned();
        match outcome {
            Ok(boxes) => {
                if pr_csv.is_some() {
                    pairs.push((boxes.clone(), read_annotation(path)?));
                }
                results.push(DetectResult {
                    image,
                    boxes: Some(boxes),
                    params: Some(&cfg.detection),
                    error: None,
                });
            }
            Err(e) => {
                log::error!("{image}: {e}");
                failures += 1;
                results.push(DetectResult {
                    image,
                    boxes: None,
                    params: None,
                    error: Some(e),
                });
            }
        }
    }
    if let Some(path) = pr_csv {
        write_pr_csv(path, &pairs)?;
        write_sidecar(path, "detect", cfg)?;
    }
    emit_json(common, "detect", cfg, &json!({ "results": results }))?;
    Ok(status(failures))
}

fn rectify(cfg: &RunConfig, common: &Common, image: &Path, bbox: Option<[usize; 4]>) -> Result<Status> {
    let out = need_out(common)?;
    let img = load_pgm16(image).with_context(|| format!("reading {}", image.display()))?;
    let boxes = match bbox {
        Some(b) => vec![BoundingBox::new(b[0], b[1], b[2], b[3]).ok_or_else(|| anyhow!("empty box {b:?}"))?],
        None => detect_modules(&img, &cfg.detection)?,
    };
    if boxes.is_empty() {
        log::warn!("no modules found in {}", image.display());
    }
    fs::create_dir_all(out)?;
    let mut failures = 0;
    let mut modules = Vec::with_capacity(boxes.len());
    for (k, b) in boxes.iter().enumerate() {
        match rectify_module(&img, b, &cfg.geometry) {
            Ok(m) => {
                let name = format!("module_{k}.pgm");
                save_pgm16(&m.image, out.join(&name))?;
                modules.push(json!({ "bbox": b, "file": name }));
            }
            Err(e) => {
                log::error!("module {k}: {e}");
                failures += 1;
                modules.push(json!({ "bbox": b, "error": e.to_string() }));
            }
        }
    }
    write_json(
        &out.join("run.json"),
        "rectify",
        cfg,
        &json!({ "image": image.to_string_lossy(), "modules": modules }),
    )?;
    Ok(status(failures))
}

fn features(cfg: &RunConfig, common: &Common) -> Result<Status> {
    let out = need_out(common)?;
    let (samples, failures) = load_samples(load_manifest(common)?, cfg, None, true)?;
    let rows: Vec<(String, FeatureVector)> =
        samples.into_iter().map(|s| (s.entry.sample_id, s.features)).collect();
    create_parent(out)?;
    write_feature_csv(out, &rows)?;
    write_sidecar(out, "features", cfg)?;
    Ok(status(failures))
}

fn fit(cfg: &RunConfig, common: &Common, estimator: Estimator, features: Option<&Path>) -> Result<Status> {
    let out = need_out(common)?;
    let features = features.map(read_features).transpose()?;
    let need_images = estimator == Estimator::Area || features.is_none();
    let (samples, failures) = load_samples(labeled(load_manifest(common)?), cfg, features.as_ref(), need_images)?;
    if samples.is_empty() {
        bail!("no labeled samples");
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let fitted = match (estimator, cfg.svr) {
        (Estimator::Svr, Some(h)) => {
            let mut params = SvrParams::new(h.c, h.epsilon, cfg.cv.gamma);
            params.tol = cfg.cv.tol;
            FittedModel {
                model: TrainedModel::Svr {
                    model: fit_svr_model(&refs, &params)?,
                },
                search: None,
            }
        }
        _ => fit_estimator(&refs, estimator, &cfg.cv, cfg.cv.seed)?,
    };
    write_json(out, "fit-svr", cfg, &fitted)?;
    Ok(status(failures))
}

fn predict(cfg: &RunConfig, common: &Common, model_path: &Path, features: Option<&Path>) -> Result<Status> {
    let out = need_out(common)?;
    let model = load_model(model_path)?;
    let features = features.map(read_features).transpose()?;
    let need_images = model.estimator() == Estimator::Area || features.is_none();
    let (samples, mut failures) = load_samples(load_manifest(common)?, cfg, features.as_ref(), need_images)?;
    let mut w = csv_writer(out)?;
    w.write_record(["sample_id", "p_rel_hat"])?;
    for s in &samples {
        match model.predict_sample(s) {
            Ok(p) => w.write_record([s.entry.sample_id.clone(), p.to_string()])?,
            Err(e) => {
                log::error!("{}: {e}", s.entry.sample_id);
                failures += 1;
            }
        }
    }
    w.flush()?;
    write_sidecar(out, "predict", cfg)?;
    Ok(status(failures))
}

fn read_predictions(path: &Path) -> Result<BTreeMap<String, f64>> {
    #[derive(Deserialize)]
    struct Row {
        sample_id: String,
        p_rel_hat: f64,
    }
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let row: Row = row.with_context(|| format!("parsing {}", path.display()))?;
        out.insert(row.sample_id, row.p_rel_hat);
    }
    Ok(out)
}

/// Scores external predictions on the folds the manifest would get.
fn score_predictions(cfg: &RunConfig, entries: &[ManifestEntry], path: &Path) -> Result<CvOutcome> {
    let predictions = read_predictions(path)?;
    let folds = stratified_group_folds(entries, cfg.cv.k, &cfg.cv.binning, cfg.cv.seed)?;
    let records = entries
        .iter()
        .map(|e| {
            Ok(PredictionRecord {
                sample_id: e.sample_id.clone(),
                fold: folds.fold_of(&e.sample_id).expect("every entry is assigned"),
                p_rel: e.p_rel()?,
                p_rel_hat: *predictions
                    .get(&e.sample_id)
                    .ok_or_else(|| anyhow!("no prediction for {}", e.sample_id))?,
                p_nom: e.p_nom,
                module_type: e.module_type.clone(),
                current_level: e.current_level,
                setting: e.setting,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvOutcome {
        folds,
        models: Vec::new(),
        report: metrics_report(&records, cfg.cv.rmse_form)?,
        records,
    })
}

fn cv(
    cfg: &RunConfig,
    common: &Common,
    estimator: Estimator,
    features: Option<&Path>,
    subsets: Option<(Vec<String>, Vec<String>)>,
    predictions: Option<&Path>,
) -> Result<Status> {
    let out = need_out(common)?;
    let entries = labeled(load_manifest(common)?);
    let (outcome, failures) = if let Some(path) = predictions {
        (score_predictions(cfg, &entries, path)?, 0)
    } else {
        let features = features.map(read_features).transpose()?;
        let need_images = estimator == Estimator::Area || features.is_none();
        let (samples, failures) = load_samples(entries, cfg, features.as_ref(), need_images)?;
        let outcome = match &subsets {
            Some((train, test)) => train_test(&samples, train, test, estimator, &cfg.cv)?,
            None => cross_validate(&samples, estimator, &cfg.cv)?,
        };
        (outcome, failures)
    };
    fs::create_dir_all(out)?;
    let mode = match (&subsets, predictions) {
        (_, Some(_)) => "external",
        (Some(_), _) => "train_test",
        _ => "cross_validation",
    };
    write_json(
        &out.join("report.json"),
        "cv",
        cfg,
        &json!({
            "mode": mode,
            "estimator": estimator,
            "train_subset": subsets.as_ref().map(|s| &s.0),
            "test_subset": subsets.as_ref().map(|s| &s.1),
            "report": outcome.report,
            "folds": outcome.folds,
            "models": outcome.models,
        }),
    )?;
    let scatter = out.join("predictions.csv");
    let mut w = csv_writer(&scatter)?;
    for r in &outcome.records {
        w.serialize(r)?;
    }
    w.flush()?;
    print!("{}", outcome.report);
    Ok(status(failures))
}

type Corpus = Vec<(Image16, Vec<BoundingBox>)>;

fn annotated_corpus(dir: &Path) -> Result<(Vec<PathBuf>, Corpus)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .pgm images in {}", dir.display());
    }
    let corpus = paths
        .par_iter()
        .map(|p| {
            let img = load_pgm16(p).with_context(|| format!("reading {}", p.display()))?;
            Ok((img, read_annotation(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((paths, corpus))
}

fn tune_detect(
    cfg: &RunConfig,
    common: &Common,
    dir: &Path,
    budget: usize,
    tau: f64,
    pr_csv: Option<&Path>,
) -> Result<Status> {
    if !(tau > 0.0 && tau <= 1.0) {
        bail!("--tau must lie in (0, 1]");
    }
    let (paths, corpus) = annotated_corpus(dir)?;
    let tuning = tune_detection(&corpus, budget, tau, cfg.cv.seed)?;
    log::info!("tuned {:?} with F1 {:.4}", tuning.params, tuning.f1);
    if let Some(path) = pr_csv {
        let pairs: Vec<_> = corpus
            .par_iter()
            .map(|(img, gt)| (detect_modules(img, &tuning.params).unwrap_or_default(), gt.clone()))
            .collect();
        write_pr_csv(path, &pairs)?;
        write_sidecar(path, "tune-detect", cfg)?;
    }
    emit_json(
        common,
        "tune-detect",
        cfg,
        &json!({ "images": paths.len(), "tau": tau, "budget": budget, "tuning": tuning }),
    )?;
    Ok(Status::Success)
}

fn tune(cfg: &RunConfig, common: &Common, features: Option<&Path>) -> Result<Status> {
    let features = features.map(read_features).transpose()?;
    let need_images = features.is_none();
    let (samples, failures) = load_samples(labeled(load_manifest(common)?), cfg, features.as_ref(), need_images)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let (params, search) = tune_svr(&refs, &cfg.cv, cfg.cv.seed)?;
    emit_json(common, "tune-svr", cfg, &json!({ "params": params, "search": search }))?;
    Ok(status(failures))
}

fn cell_loss(
    cfg: &RunConfig,
    common: &Common,
    maps: &[PathBuf],
    healthy: &[PathBuf],
    model: Option<&Path>,
    p_nom: Option<f64>,
) -> Result<Status> {
    let out = need_out(common)?;
    let mut failures = 0;
    // (source, grid, p_nom, map)
    let mut items: Vec<(String, CellGrid, f64, LossMap)> = Vec::new();
    if let Some(model_path) = model {
        let (area, inactive) = match load_model(model_path)? {
            TrainedModel::Area { model, inactive } => (model, inactive),
            TrainedModel::Svr { .. } => bail!("cell losses need an area model"),
        };
        let entries = load_manifest(common)?;
        let made: Vec<Result<(String, CellGrid, f64, LossMap), String>> = entries
            .par_iter()
            .map(|e| {
                let img = load_pgm16(&e.image_path).map_err(|err| format!("{}: {err}", e.image_path))?;
                let map = synth_loss_map(&img, inactive, &area).map_err(|err| err.to_string())?;
                let grid = CellGrid::new(e.rows, e.cols).map_err(|err| err.to_string())?;
                Ok((e.sample_id.clone(), grid, e.p_nom, map))
            })
            .collect();
        for m in made {
            match m {
                Ok(item) => items.push(item),
                Err(e) => {
                    log::error!("{e}");
                    failures += 1;
                }
            }
        }
    } else {
        if maps.is_empty() {
            bail!("give loss maps or --model with --manifest");
        }
        let p_nom = p_nom.ok_or_else(|| anyhow!("--p-nom is required with loss maps"))?;
        let load = |paths: &[PathBuf]| -> Result<Vec<LossMap>> {
            paths
                .iter()
                .map(|p| load_loss_map(p).with_context(|| format!("reading {}", p.display())))
                .collect()
        };
        let mut loaded = load(maps)?;
        if !healthy.is_empty() {
            loaded = debias_maps(&loaded, &load(healthy)?)?;
        }
        let grid = CellGrid::new(cfg.geometry.rows, cfg.geometry.cols)?;
        for (p, map) in maps.iter().zip(loaded) {
            items.push((p.to_string_lossy().into_owned(), grid, p_nom, map));
        }
    }
    let mut w = csv_writer(out)?;
    w.write_record(["source", "row", "col", "loss_wp"])?;
    for (source, grid, p_nom, map) in &items {
        let losses = cell_losses(map, grid, *p_nom)?;
        for (idx, loss) in losses.iter().enumerate() {
            w.serialize((source, idx / grid.cols, idx % grid.cols, loss))?;
        }
    }
    w.flush()?;
    write_sidecar(out, "cell-loss", cfg)?;
    Ok(status(failures))
}

#[derive(Serialize)]
struct InspectResult {
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    modules: Option<Vec<ModuleReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn inspect(
    cfg: &RunConfig,
    common: &Common,
    images: &[PathBuf],
    model_path: &Path,
    p_nom: Option<f64>,
) -> Result<Status> {
    let model = load_model(model_path)?;
    // (image, sample id, p_nom, geometry)
    let mut jobs: Vec<(String, Option<String>, f64, ModuleGeometry)> = Vec::new();
    if common.manifest.is_some() {
        for e in load_manifest(common)? {
            let geometry = ModuleGeometry::new(e.rows, e.cols, cfg.geometry.cell_px)?;
            jobs.push((e.image_path, Some(e.sample_id), e.p_nom, geometry));
        }
    }
    if !images.is_empty() {
        let p_nom = p_nom.ok_or_else(|| anyhow!("--p-nom is required with image arguments"))?;
        for p in images {
            jobs.push((p.to_string_lossy().into_owned(), None, p_nom, cfg.geometry));
        }
    }
    if jobs.is_empty() {
        log::warn!("nothing to inspect");
    }
    let results: Vec<InspectResult> = jobs
        .into_par_iter()
        .map(|(image, sample_id, p_nom, geometry)| {
            let outcome = load_pgm16(&image)
                .map_err(|e| e.to_string())
                .and_then(|img| inspect_image(&img, &cfg.detection, &geometry, &model, p_nom).map_err(|e| e.to_string()));
            match outcome {
                Ok(modules) => InspectResult {
                    image,
                    sample_id,
                    modules: Some(modules),
                    error: None,
                },
                Err(e) => InspectResult {
                    image,
                    sample_id,
                    modules: None,
                    error: Some(e),
                },
            }
        })
        .collect();
    let mut failures = 0;
    for r in &results {
        if let Some(e) = &r.error {
            log::error!("{}: {e}", r.image);
            failures += 1;
        }
        for m in r.modules.iter().flatten() {
            if let Some(e) = &m.error {
                log::error!("{}: module {:?}: {e}", r.image, m.bbox);
                failures += 1;
            }
        }
    }
    emit_json(common, "inspect", cfg, &json!({ "results": results }))?;
    Ok(status(failures))
}
