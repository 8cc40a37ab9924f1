//! Estimator training, cross-validation and end-to-end inspection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{detect_modules, BoundingBox, DetectError, DetectionParams};
use crate::eval::{
    metrics_report, random_search_parallel, stratified_group_folds, train_val_split, Binning, EvalError,
    FoldAssignment, ManifestEntry, MetricsReport, ParamRange, PredictionRecord, RmseForm, SearchResult,
};
use crate::imagecore::Image16;
use crate::power::{
    cell_losses, fit_area_model, inactive_fraction, synth_loss_map, AreaModel, CellGrid, InactiveThreshold,
    PowerError, PowerEstimate,
};
use crate::rectify::{rectify_module, ModuleGeometry, RectifyError};
use crate::regress::{
    extract_mean_std, svr_fit, svr_predict, FeatureNormalizer, FeatureVector, Gamma, RegressError, SvrModel,
    SvrParams,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Rectify(#[from] RectifyError),
    #[error("no sample matches {0}")]
    EmptySubset(String),
    #[error("fold {0} has no test samples")]
    EmptyFold(usize),
    #[error("sample {0} is missing from the fold assignment")]
    Unassigned(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// RBF epsilon-SVR on standardized features.
    Svr,
    /// Linear model on the inactive-area fraction.
    Area,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
    pub binning: Binning,
    pub seed: u64,
    /// Share of the training folds held out for tuning.
    pub val_fraction: f64,
    pub hpo_budget: usize,
    pub c_range: (f64, f64),
    pub epsilon_range: (f64, f64),
    pub gamma: Gamma,
    pub tol: f64,
    pub inactive: InactiveThreshold,
    pub fixed_intercept: Option<f64>,
    pub rmse_form: RmseForm,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            binning: Binning::default(),
            seed: 0,
            val_fraction: 0.4,
            hpo_budget: 250,
            c_range: (1e-2, 1e3),
            epsilon_range: (1e-4, 1e-1),
            gamma: Gamma::Scale,
            tol: 1e-3,
            inactive: InactiveThreshold::Otsu,
            fixed_intercept: None,
            rmse_form: RmseForm::Printed,
        }
    }
}

/// A manifest entry with the inputs of both estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub features: FeatureVector,
    pub inactive_fraction: f64,
}

impl Sample {
    /// Mean/std features and inactive fraction of a rectified module image.
    pub fn from_image(entry: ManifestEntry, img: &Image16, inactive: InactiveThreshold) -> Result<Self, PipelineError> {
        Ok(Self {
            inactive_fraction: inactive_fraction(img, inactive)?,
            features: extract_mean_std(img),
            entry,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum TrainedModel {
    Svr { model: SvrModel },
    Area { model: AreaModel, inactive: InactiveThreshold },
}

impl TrainedModel {
    pub fn estimator(&self) -> Estimator {
        match self {
            TrainedModel::Svr { .. } => Estimator::Svr,
            TrainedModel::Area { .. } => Estimator::Area,
        }
    }

    pub fn predict_sample(&self, s: &Sample) -> Result<f64, PipelineError> {
        Ok(match self {
            TrainedModel::Svr { model } => svr_predict(model, &s.features)?,
            TrainedModel::Area { model, .. } => model.predict(s.inactive_fraction),
        })
    }

    /// Prediction straight from a rectified module image.
    pub fn predict_image(&self, img: &Image16) -> Result<f64, PipelineError> {
        Ok(match self {
            TrainedModel::Svr { model } => svr_predict(model, &extract_mean_std(img))?,
            TrainedModel::Area { model, inactive } => model.predict(inactive_fraction(img, *inactive)?),
        })
    }
}

fn labels(samples: &[&Sample]) -> Result<Vec<f64>, PipelineError> {
    samples.iter().map(|s| Ok(s.entry.p_rel()?)).collect()
}

/// Standardizes features on `train` and fits an SVR with fixed hyperparameters.
pub fn fit_svr_model(train: &[&Sample], params: &SvrParams) -> Result<SvrModel, PipelineError> {
    let raw: Vec<FeatureVector> = train.iter().map(|s| s.features.clone()).collect();
    let normalizer = FeatureNormalizer::fit(&raw)?;
    let x = raw.iter().map(|f| normalizer.apply(f)).collect::<Result<Vec<_>, _>>()?;
    let fit = svr_fit(&x, &labels(train)?, params)?;
    if !fit.converged {
        log::warn!("SVR stopped at the iteration cap (violation {:.2e})", fit.violation);
    }
    let mut model = fit.model;
    model.normalizer = Some(normalizer);
    Ok(model)
}

fn svr_params(p: &BTreeMap<String, f64>, cfg: &CvConfig) -> SvrParams {
    let mut params = SvrParams::new(p["c"], p["epsilon"], cfg.gamma);
    params.tol = cfg.tol;
    params
}

/// Random search for `C` and `epsilon` on a stratified, instance-disjoint
/// split of `train`, scored by negative validation MAE.
pub fn tune_svr(train: &[&Sample], cfg: &CvConfig, seed: u64) -> Result<(SvrParams, SearchResult), PipelineError> {
    let entries: Vec<&ManifestEntry> = train.iter().map(|s| &s.entry).collect();
    let split = train_val_split(&entries, cfg.val_fraction, &cfg.binning, seed)?;
    let fit_part: Vec<&Sample> = split.train.iter().map(|&i| train[i]).collect();
    let val_part: Vec<&Sample> = split.val.iter().map(|&i| train[i]).collect();
    let val_truth = labels(&val_part)?;
    let space = [
        ParamRange::log("c", cfg.c_range.0, cfg.c_range.1),
        ParamRange::log("epsilon", cfg.epsilon_range.0, cfg.epsilon_range.1),
    ];
    let search = random_search_parallel(&space, cfg.hpo_budget, seed, |p| -> Result<f64, PipelineError> {
        let model = TrainedModel::Svr {
            model: fit_svr_model(&fit_part, &svr_params(p, cfg))?,
        };
        let pred = val_part
            .iter()
            .map(|s| model.predict_sample(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(-crate::eval::mae(&val_truth, &pred)?)
    })?;
    Ok((svr_params(&search.best.params, cfg), search))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub model: TrainedModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchResult>,
}

/// Fits one estimator on `train`. Only the labels of `train` are read.
pub fn fit_estimator(
    train: &[&Sample],
    estimator: Estimator,
    cfg: &CvConfig,
    seed: u64,
) -> Result<FittedModel, PipelineError> {
    match estimator {
        Estimator::Area => {
            let fractions: Vec<f64> = train.iter().map(|s| s.inactive_fraction).collect();
            let model = fit_area_model(&fractions, &labels(train)?, cfg.fixed_intercept)?;
            Ok(FittedModel {
                model: TrainedModel::Area {
                    model,
                    inactive: cfg.inactive,
                },
                search: None,
            })
        }
        Estimator::Svr => {
            let (params, search) = tune_svr(train, cfg, seed)?;
            log::info!("best C = {:.4e}, epsilon = {:.4e}", params.c, params.epsilon);
            Ok(FittedModel {
                model: TrainedModel::Svr {
                    model: fit_svr_model(train, &params)?,
                },
                search: Some(search),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub folds: FoldAssignment,
    pub models: Vec<FittedModel>,
    pub records: Vec<PredictionRecord>,
    pub report: MetricsReport,
}

fn predict_records(model: &TrainedModel, test: &[&Sample], fold: usize) -> Result<Vec<PredictionRecord>, PipelineError> {
    test.iter()
        .map(|s| {
            Ok(PredictionRecord {
                sample_id: s.entry.sample_id.clone(),
                fold,
                p_rel: s.entry.p_rel()?,
                p_rel_hat: model.predict_sample(s)?,
                p_nom: s.entry.p_nom,
                module_type: s.entry.module_type.clone(),
                current_level: s.entry.current_level,
                setting: s.entry.setting,
            })
        })
        .collect()
}

/// Stratified group `k`-fold cross-validation.
pub fn cross_validate(samples: &[Sample], estimator: Estimator, cfg: &CvConfig) -> Result<CvOutcome, PipelineError> {
    let manifest: Vec<ManifestEntry> = samples.iter().map(|s| s.entry.clone()).collect();
    let folds = stratified_group_folds(&manifest, cfg.k, &cfg.binning, cfg.seed)?;
    cross_validate_with_folds(samples, &folds, estimator, cfg)
}

/// Cross-validation over a given assignment. Fold `f` is fitted (and tuned)
/// on the samples of every other fold only.
pub fn cross_validate_with_folds(
    samples: &[Sample],
    folds: &FoldAssignment,
    estimator: Estimator,
    cfg: &CvConfig,
) -> Result<CvOutcome, PipelineError> {
    let mut fold_of = Vec::with_capacity(samples.len());
    for s in samples {
        fold_of.push(
            folds
                .fold_of(&s.entry.sample_id)
                .ok_or_else(|| PipelineError::Unassigned(s.entry.sample_id.clone()))?,
        );
    }
    let per_fold = (0..folds.k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<&Sample> = samples.iter().zip(&fold_of).filter(|(_, &g)| g != f).map(|(s, _)| s).collect();
            let test: Vec<&Sample> = samples.iter().zip(&fold_of).filter(|(_, &g)| g == f).map(|(s, _)| s).collect();
            if test.is_empty() {
                return Err(PipelineError::EmptyFold(f));
            }
            let fitted = fit_estimator(&train, estimator, cfg, cfg.seed.wrapping_add(f as u64))?;
            let records = predict_records(&fitted.model, &test, f)?;
            Ok((fitted, records))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    let mut models = Vec::with_capacity(folds.k);
    let mut records = Vec::with_capacity(samples.len());
    for (m, r) in per_fold {
        models.push(m);
        records.extend(r);
    }
    Ok(CvOutcome {
        folds: folds.clone(),
        report: metrics_report(&records, cfg.rmse_form)?,
        models,
        records,
    })
}

/// Generalization run: fit on every sample whose module type is in `train_types`,
/// test on those in `test_types`. Reported as a single fold 0.
pub fn train_test(
    samples: &[Sample],
    train_types: &[String],
    test_types: &[String],
    estimator: Estimator,
    cfg: &CvConfig,
) -> Result<CvOutcome, PipelineError> {
    let pick = |types: &[String]| -> Vec<&Sample> {
        samples.iter().filter(|s| types.contains(&s.entry.module_type)).collect()
    };
    let train = pick(train_types);
    let test = pick(test_types);
    if train.is_empty() {
        return Err(PipelineError::EmptySubset(train_types.join(",")));
    }
    if test.is_empty() {
        return Err(PipelineError::EmptySubset(test_types.join(",")));
    }
    let fitted = fit_estimator(&train, estimator, cfg, cfg.seed)?;
    let records = predict_records(&fitted.model, &test, 0)?;
    let assignment = test.iter().map(|s| (s.entry.sample_id.clone(), 0)).collect();
    Ok(CvOutcome {
        folds: FoldAssignment {
            seed: cfg.seed,
            k: 1,
            assignment,
        },
        report: metrics_report(&records, cfg.rmse_form)?,
        models: vec![fitted],
        records,
    })
}

/// Estimate for one detected module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleReport {
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<PowerEstimate>,
    /// Per-cell loss in watts, row-major, when the model yields a loss map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_loss_wp: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn inspect_module(
    img: &Image16,
    bbox: &BoundingBox,
    geometry: &ModuleGeometry,
    model: &TrainedModel,
    p_nom: f64,
) -> Result<(PowerEstimate, Option<Vec<f64>>), PipelineError> {
    let module = rectify_module(img, bbox, geometry)?;
    let p_rel_hat = model.predict_image(&module.image)?;
    let estimate = PowerEstimate::new(p_rel_hat, p_nom)?;
    let cells = match model {
        TrainedModel::Area { model, inactive } => {
            let map = synth_loss_map(&module.image, *inactive, model)?;
            Some(cell_losses(&map, &CellGrid::new(geometry.rows, geometry.cols)?, p_nom)?)
        }
        TrainedModel::Svr { .. } => None,
    };
    Ok((estimate, cells))
}

/// Detect, rectify and estimate every module of one measurement. Module-level
/// failures are reported in place; a detection failure fails the image.
pub fn inspect_image(
    img: &Image16,
    params: &DetectionParams,
    geometry: &ModuleGeometry,
    model: &TrainedModel,
    p_nom: f64,
) -> Result<Vec<ModuleReport>, PipelineError> {
    let boxes = detect_modules(img, params)?;
    Ok(boxes
        .into_iter()
        .map(|bbox| match inspect_module(img, &bbox, geometry, model, p_nom) {
            Ok((estimate, cell_loss_wp)) => ModuleReport {
                bbox,
                estimate: Some(estimate),
                cell_loss_wp,
                error: None,
            },
            Err(e) => ModuleReport {
                bbox,
                estimate: None,
                cell_loss_wp: None,
                error: Some(e.to_string()),
            },
        })
        .collect())
}
