use elpower::eval::{stratified_group_folds, CurrentLevel, EvalError, ManifestEntry, Setting};
use elpower::pipeline::{
    cross_validate, cross_validate_with_folds, inspect_image, CvConfig, Estimator, PipelineError, Sample,
    TrainedModel,
};
use elpower::power::{decode_loss_map, fit_area_model, inactive_fraction, total_loss_from_map, InactiveThreshold};
use elpower::rectify::{estimate_corners, ModuleGeometry};
use elpower::synth::{synth_module, synth_scene, ModuleStyle, SceneModule, SceneSpec};
use elpower::DetectionParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Samples with `p_rel = 1 - fraction + N(0, sigma)`, some instances measured repeatedly.
fn samples(n: usize, sigma: f64, seed: u64) -> (Vec<Sample>, Vec<f64>) {
    let style = ModuleStyle {
        cell_px: 16,
        ..ModuleStyle::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut instance = 0;
    while out.len() < n {
        let fraction = rng.random_range(0.0..0.3);
        let repeats = if rng.random_range(0..4) == 0 { 2 } else { 1 };
        for _ in 0..repeats.min(n - out.len()) {
            let module = synth_module(&style, fraction, 30.0, rng.random()).unwrap();
            let e = if sigma > 0.0 {
                Normal::new(0.0, sigma).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            let entry = ManifestEntry {
                sample_id: format!("s{}", out.len()),
                image_path: String::new(),
                module_type: "T1".into(),
                instance_id: format!("i{instance}"),
                p_nom: 230.0,
                p_mpp: Some((1.0 - module.defect_fraction + e) * 230.0),
                current_level: CurrentLevel::High,
                setting: Setting::Indoor,
                rows: style.rows,
                cols: style.cols,
            };
            noise.push(e);
            out.push(Sample::from_image(entry, &module.image, InactiveThreshold::Otsu).unwrap());
        }
        instance += 1;
    }
    (out, noise)
}

#[test]
fn noiseless_labels_are_recovered() {
    let (s, _) = samples(120, 0.0, 1);
    let cv = cross_validate(&s, Estimator::Area, &CvConfig::default()).unwrap();
    assert!(cv.report.overall.mae < 0.005, "MAE {}", cv.report.overall.mae);
    assert_eq!(cv.records.len(), 120);
    assert_eq!(cv.models.len(), 5);
}

#[test]
fn noisy_labels_give_mae_near_noise_level() {
    let (s, noise) = samples(200, 0.02, 2);
    let cv = cross_validate(&s, Estimator::Area, &CvConfig::default()).unwrap();
    let expected = noise.iter().map(|e| e.abs()).sum::<f64>() / noise.len() as f64;
    let mae = cv.report.overall.mae;
    assert!((mae - expected).abs() <= 0.2 * expected, "MAE {mae} vs E|noise| {expected}");
}

#[test]
fn more_folds_than_instances_is_an_error() {
    let (s, _) = samples(6, 0.0, 3);
    let cfg = CvConfig {
        k: 20,
        ..CvConfig::default()
    };
    let err = cross_validate(&s, Estimator::Area, &cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Eval(EvalError::TooFewInstances { .. })), "{err}");
}

#[test]
fn test_labels_never_reach_training() {
    let (clean, _) = samples(50, 0.01, 4);
    let cfg = CvConfig {
        hpo_budget: 6,
        ..CvConfig::default()
    };
    let manifest: Vec<ManifestEntry> = clean.iter().map(|s| s.entry.clone()).collect();
    let folds = stratified_group_folds(&manifest, cfg.k, &cfg.binning, cfg.seed).unwrap();
    for estimator in [Estimator::Area, Estimator::Svr] {
        let base = cross_validate_with_folds(&clean, &folds, estimator, &cfg).unwrap();
        let mut poisoned = clean.clone();
        for s in poisoned.iter_mut().filter(|s| folds.fold_of(&s.entry.sample_id) == Some(0)) {
            s.entry.p_mpp = Some(0.0);
        }
        let dirty = cross_validate_with_folds(&poisoned, &folds, estimator, &cfg).unwrap();
        assert_eq!(dirty.models[0], base.models[0], "{estimator:?}");
        assert_ne!(dirty.report.overall.mae, base.report.overall.mae);
    }
}

#[test]
fn svr_cross_validation_tracks_labels() {
    let (s, _) = samples(100, 0.005, 5);
    let cfg = CvConfig {
        hpo_budget: 20,
        ..CvConfig::default()
    };
    let cv = cross_validate(&s, Estimator::Svr, &cfg).unwrap();
    assert!(cv.report.overall.mae < 0.03, "MAE {}", cv.report.overall.mae);
    for m in &cv.models {
        assert_eq!(m.search.as_ref().unwrap().trials.len(), 20);
    }
}

#[test]
fn inspection_of_three_module_scene() {
    let fractions = [0.0, 0.1, 0.2];
    let spec = SceneSpec {
        width: 1300,
        height: 800,
        background: 150,
        noise_sigma: 25.0,
        style: ModuleStyle::default(),
        modules: fractions
            .iter()
            .enumerate()
            .map(|(i, &f)| SceneModule::axis_aligned(80.0 + 400.0 * i as f64, 80.0, 330.0, 550.0, f))
            .collect(),
        seed: 9,
    };
    let (img, truth) = synth_scene(&spec).unwrap();
    // calibrated on rectified-style modules, so gap pixels are absorbed by the intercept
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for _ in 0..40 {
        let m = synth_module(&ModuleStyle::default(), rng.random_range(0.0..0.3), 25.0, rng.random()).unwrap();
        x.push(inactive_fraction(&m.image, InactiveThreshold::Otsu).unwrap());
        y.push(1.0 - m.defect_fraction);
    }
    let model = TrainedModel::Area {
        model: fit_area_model(&x, &y, None).unwrap(),
        inactive: InactiveThreshold::Otsu,
    };
    let geometry = ModuleGeometry::new(10, 6, 40).unwrap();
    // a fully dark corner cell would pull the extremal corner inward; this layout has none
    for b in &truth {
        let crop = img.crop(b.x0, b.y0, b.x1, b.y1).unwrap();
        let (w, h) = ((b.width() - 1) as f64, (b.height() - 1) as f64);
        let want = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        for (c, t) in estimate_corners(&crop).unwrap().corners().iter().zip(want) {
            assert!((c.0 - t.0).hypot(c.1 - t.1) <= 2.0);
        }
    }
    let mut reports = inspect_image(&img, &DetectionParams::default(), &geometry, &model, 230.0).unwrap();
    reports.sort_by_key(|r| r.bbox.x0);
    assert_eq!(reports.len(), 3);
    for (r, f) in reports.iter().zip(fractions) {
        let est = r.estimate.unwrap();
        assert!((est.p_rel_hat - (1.0 - f)).abs() < 0.03, "fraction {f}: {}", est.p_rel_hat);
        let cells: f64 = r.cell_loss_wp.as_ref().unwrap().iter().sum();
        assert!((cells - (230.0 - est.p_mpp_hat)).abs() < 1e-9);
    }
}

#[test]
fn externally_encoded_loss_map_loads_with_identical_sum() {
    let (w, h) = (7u32, 5u32);
    let values: Vec<f64> = (0..w * h).map(|i| -(i as f64) * 1e-4).collect();
    let mut bytes = b"PLM1".to_vec();
    bytes.extend(w.to_le_bytes());
    bytes.extend(h.to_le_bytes());
    for v in &values {
        bytes.extend(v.to_le_bytes());
    }
    let map = decode_loss_map(&bytes).unwrap();
    assert_eq!(map.data(), values.as_slice());
    let sum: f64 = values.iter().sum();
    assert_eq!(map.sum(), sum);
    assert_eq!(total_loss_from_map(&map), 1.0 + sum);
}
