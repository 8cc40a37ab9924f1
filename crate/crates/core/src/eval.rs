//! Evaluation harness: error metrics, IoU-based detection scoring,
//! instance-disjoint stratified folds, train/validation splits and budgeted
//! random search.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{detect_modules, BoundingBox, DetectionParams};
use crate::imagecore::Image16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("input is constant")]
    Constant,
    #[error("{instances} instances cannot fill {needed} groups")]
    TooFewInstances { instances: usize, needed: usize },
    #[error("sample {0} has no power label")]
    Unlabeled(String),
    #[error("invalid manifest entry {id}: {reason}")]
    Manifest { id: String, reason: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("manifest line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Regression metrics

fn check_pair(truth: &[f64], pred: &[f64]) -> Result<(), EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::Length(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64, EvalError> {
    check_pair(truth, pred)?;
    let s: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum();
    Ok(s / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseForm {
    /// `(1/N) * sqrt(sum e^2)`, with the normalization outside the root.
    #[default]
    Printed,
    /// `sqrt((1/N) * sum e^2)`
    Conventional,
}

pub fn rmse(truth: &[f64], pred: &[f64], form: RmseForm) -> Result<f64, EvalError> {
    check_pair(truth, pred)?;
    let n = truth.len() as f64;
    let ss: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(match form {
        RmseForm::Printed => ss.sqrt() / n,
        RmseForm::Conventional => (ss / n).sqrt(),
    })
}

/// Sample Pearson correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::Empty);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(EvalError::Constant);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Detection scoring

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `(pred index, gt index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub n_pred: usize,
    pub n_gt: usize,
}

fn prf(tp: usize, n_pred: usize, n_gt: usize) -> (f64, f64, f64) {
    let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// One-to-one greedy matching in descending IoU order; pairs below `tau` stay unmatched.
pub fn match_detections(pred: &[BoundingBox], gt: &[BoundingBox], tau: f64) -> MatchResult {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let v = iou(p, g);
            if v >= tau && v > 0.0 {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut matches = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            matches.push((i, j));
        }
    }
    let (precision, recall, f1) = prf(matches.len(), pred.len(), gt.len());
    MatchResult {
        precision,
        recall,
        f1,
        matches,
        n_pred: pred.len(),
        n_gt: gt.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision and recall of a corpus of `(pred, gt)` pairs at each threshold,
/// pooling counts over all images.
pub fn pr_curve(corpus: &[(Vec<BoundingBox>, Vec<BoundingBox>)], taus: &[f64]) -> Vec<PrPoint> {
    taus.iter()
        .map(|&tau| {
            let (mut tp, mut np, mut ng) = (0, 0, 0);
            for (pred, gt) in corpus {
                let m = match_detections(pred, gt, tau);
                tp += m.matches.len();
                np += m.n_pred;
                ng += m.n_gt;
            }
            let (precision, recall, f1) = prf(tp, np, ng);
            PrPoint {
                tau,
                precision,
                recall,
                f1,
            }
        })
        .collect()
}

/// Runs the detector on every annotated image and scores the pooled matches.
pub fn corpus_detection_scores(
    corpus: &[(Image16, Vec<BoundingBox>)],
    params: &DetectionParams,
    tau: f64,
) -> PrPoint {
    let pairs: Vec<(Vec<BoundingBox>, Vec<BoundingBox>)> = corpus
        .iter()
        .map(|(img, gt)| (detect_modules(img, params).unwrap_or_default(), gt.clone()))
        .collect();
    pr_curve(&pairs, &[tau])[0]
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurrentLevel {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Indoor,
    Onsite,
}

impl fmt::Display for CurrentLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurrentLevel::High => "high",
            CurrentLevel::Low => "low",
        })
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Indoor => "indoor",
            Setting::Onsite => "onsite",
        })
    }
}

/// One labeled (or unlabeled) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub image_path: String,
    pub module_type: String,
    pub instance_id: String,
    pub p_nom: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_mpp: Option<f64>,
    pub current_level: CurrentLevel,
    pub setting: Setting,
    pub rows: usize,
    pub cols: usize,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<(), EvalError> {
        let fail = |reason: &str| {
            Err(EvalError::Manifest {
                id: self.sample_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.instance_id.is_empty() {
            return fail("empty instance_id");
        }
        if !(self.p_nom > 0.0) {
            return fail("p_nom must be positive");
        }
        if let Some(p) = self.p_mpp {
            if !(p >= 0.0) || p > 1.2 * self.p_nom {
                return fail("p_mpp outside [0, 1.2 * p_nom]");
            }
        }
        if self.rows == 0 || self.cols == 0 {
            return fail("empty cell grid");
        }
        Ok(())
    }

    /// `p_mpp / p_nom`
    pub fn p_rel(&self) -> Result<f64, EvalError> {
        self.p_mpp
            .map(|p| p / self.p_nom)
            .ok_or_else(|| EvalError::Unlabeled(self.sample_id.clone()))
    }
}

/// Reads a JSON-lines manifest; blank lines are ignored.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, EvalError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|source| EvalError::Parse { line: i + 1, source })?;
        entry.validate()?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), EvalError> {
    let mut file = fs::File::create(path)?;
    for e in entries {
        serde_json::to_writer(&mut file, e)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Folds and splits

/// Discretization of relative power into equal-width bins; values beyond the
/// last bin are clamped into it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub bins: usize,
    pub bin_width: f64,
}

impl Default for Binning {
    fn default() -> Self {
        Self {
            bins: 20,
            bin_width: 0.05,
        }
    }
}

impl Binning {
    pub fn bin(&self, p_rel: f64) -> usize {
        let b = (p_rel / self.bin_width).floor();
        if b < 0.0 {
            0
        } else {
            (b as usize).min(self.bins - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub seed: u64,
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.assignment.get(sample_id).copied()
    }

    /// Manifest indices per fold.
    pub fn fold_indices(&self, manifest: &[ManifestEntry]) -> Vec<Vec<usize>> {
        let mut folds = vec![Vec::new(); self.k];
        for (i, e) in manifest.iter().enumerate() {
            if let Some(f) = self.fold_of(&e.sample_id) {
                folds[f].push(i);
            }
        }
        folds
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// All samples of one physical module.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGroup {
    pub instance_id: String,
    /// Indices into the entry slice.
    pub members: Vec<usize>,
    /// Bin of the instance's median relative power.
    pub bin: usize,
}

/// Groups entries by instance (first-appearance order) and bins each instance.
pub fn instance_groups<E: std::borrow::Borrow<ManifestEntry>>(
    entries: &[E],
    binning: &Binning,
) -> Result<Vec<InstanceGroup>, EvalError> {
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        let e = e.borrow();
        e.p_rel()?;
        members
            .entry(e.instance_id.clone())
            .or_insert_with(|| {
                order.push(e.instance_id.clone());
                Vec::new()
            })
            .push(i);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let idx = members.remove(&id).unwrap_or_default();
            let mut p: Vec<f64> = idx
                .iter()
                .map(|&i| entries[i].borrow().p_rel().unwrap_or(0.0))
                .collect();
            p.sort_by(f64::total_cmp);
            let n = p.len();
            let median = if n % 2 == 1 { p[n / 2] } else { 0.5 * (p[n / 2 - 1] + p[n / 2]) };
            InstanceGroup {
                instance_id: id,
                members: idx,
                bin: binning.bin(median),
            }
        })
        .collect())
}

/// Merges bins holding fewer than `min_instances` instances into the nearest
/// nonempty bin. Returns a stratum label (the lowest member bin) per bin.
pub fn merge_sparse_bins(groups: &[InstanceGroup], bins: usize, min_instances: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for g in groups {
        counts[g.bin] += 1;
    }
    // each stratum is a sorted list of bins
    let mut strata: Vec<Vec<usize>> = (0..bins).filter(|&b| counts[b] > 0).map(|b| vec![b]).collect();
    loop {
        if strata.len() <= 1 {
            break;
        }
        let size = |s: &Vec<usize>| s.iter().map(|&b| counts[b]).sum::<usize>();
        let Some((victim, _)) = strata
            .iter()
            .enumerate()
            .filter(|(_, s)| size(s) < min_instances)
            .min_by_key(|(i, s)| (size(s), *i))
        else {
            break;
        };
        let dist = |a: &Vec<usize>, b: &Vec<usize>| {
            a.iter()
                .flat_map(|x| b.iter().map(move |y| x.abs_diff(*y)))
                .min()
                .unwrap_or(usize::MAX)
        };
        let target = (0..strata.len())
            .filter(|&j| j != victim)
            .min_by_key(|&j| (dist(&strata[victim], &strata[j]), j))
            .expect("at least two strata");
        let moved = strata[victim].clone();
        strata[target].extend(moved);
        strata[target].sort_unstable();
        strata.remove(victim);
    }
    let mut label = (0..bins).collect::<Vec<_>>();
    for s in &strata {
        for &b in s {
            label[b] = s[0];
        }
    }
    label
}

fn shuffled_by_size(groups: &[&InstanceGroup], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    // stable: equal sizes keep the shuffled order
    order.sort_by(|&a, &b| groups[b].members.len().cmp(&groups[a].members.len()));
    order
}

/// Stratified, instance-disjoint `k`-fold assignment.
///
/// Instances are stratified by the bin of their median relative power (sparse
/// bins merged with their nearest neighbour); within each stratum instances are
/// placed largest-first into the fold holding the fewest samples of that
/// stratum, ties going to the fold with fewer samples overall.
pub fn stratified_group_folds(
    manifest: &[ManifestEntry],
    k: usize,
    binning: &Binning,
    seed: u64,
) -> Result<FoldAssignment, EvalError> {
    if k < 2 {
        return Err(EvalError::Argument(format!("k = {k}")));
    }
    if binning.bins == 0 || !(binning.bin_width > 0.0) {
        return Err(EvalError::Argument("bad binning".into()));
    }
    let groups = instance_groups(manifest, binning)?;
    if groups.len() < k {
        return Err(EvalError::TooFewInstances {
            instances: groups.len(),
            needed: k,
        });
    }
    let stratum = merge_sparse_bins(&groups, binning.bins, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut per_stratum: BTreeMap<usize, Vec<&InstanceGroup>> = BTreeMap::new();
    for g in &groups {
        per_stratum.entry(stratum[g.bin]).or_default().push(g);
    }
    let mut totals = vec![0usize; k];
    let mut assignment = BTreeMap::new();
    for members in per_stratum.values() {
        let mut counts = vec![0usize; k];
        for i in shuffled_by_size(members, &mut rng) {
            let g = members[i];
            let fold = (0..k)
                .min_by_key(|&f| (counts[f], totals[f], f))
                .expect("k >= 2");
            counts[fold] += g.members.len();
            totals[fold] += g.members.len();
            for &m in &g.members {
                assignment.insert(manifest[m].sample_id.clone(), fold);
            }
        }
    }
    Ok(FoldAssignment { seed, k, assignment })
}

/// Indices into the training entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified, instance-disjoint split with `round(val_fraction * N)` target
/// validation samples apportioned over strata by largest remainder.
pub fn train_val_split<E: std::borrow::Borrow<ManifestEntry>>(
    entries: &[E],
    val_fraction: f64,
    binning: &Binning,
    seed: u64,
) -> Result<Split, EvalError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(EvalError::Argument(format!("val_fraction = {val_fraction}")));
    }
    let groups = instance_groups(entries, binning)?;
    if groups.len() < 2 {
        return Err(EvalError::TooFewInstances {
            instances: groups.len(),
            needed: 2,
        });
    }
    let stratum = merge_sparse_bins(&groups, binning.bins, 2);
    let mut per_stratum: BTreeMap<usize, Vec<&InstanceGroup>> = BTreeMap::new();
    for g in &groups {
        per_stratum.entry(stratum[g.bin]).or_default().push(g);
    }

    let n: usize = entries.len();
    let target = (val_fraction * n as f64).round() as usize;
    let sizes: Vec<usize> = per_stratum
        .values()
        .map(|gs| gs.iter().map(|g| g.members.len()).sum())
        .collect();
    let exact: Vec<f64> = sizes.iter().map(|&s| val_fraction * s as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..quota.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let assigned: usize = quota.iter().sum();
    for &s in by_remainder.iter().take(target.saturating_sub(assigned)) {
        quota[s] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (members, &q) in per_stratum.values().zip(&quota) {
        let mut taken = 0usize;
        for i in shuffled_by_size(members, &mut rng) {
            let g = members[i];
            let size = g.members.len();
            let better = (taken + size).abs_diff(q) < taken.abs_diff(q);
            if better {
                taken += size;
                split.val.extend(&g.members);
            } else {
                split.train.extend(&g.members);
            }
        }
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(EvalError::TooFewInstances {
            instances: groups.len(),
            needed: 2,
        });
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

// ---------------------------------------------------------------------------
// Random search

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub low: f64,
    pub high: f64,
    pub scale: ParamScale,
}

impl ParamRange {
    pub fn linear(name: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            low,
            high,
            scale: ParamScale::Linear,
        }
    }

    pub fn log(name: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            low,
            high,
            scale: ParamScale::Log,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self.scale {
            ParamScale::Linear => self.low + (self.high - self.low) * rng.random::<f64>(),
            ParamScale::Log => {
                let (a, b) = (self.low.ln(), self.high.ln());
                (a + (b - a) * rng.random::<f64>()).exp()
            }
        }
    }
}

pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Params,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

fn sample_trials(space: &[ParamRange], budget: usize, seed: u64) -> Result<Vec<Params>, EvalError> {
    if budget == 0 {
        return Err(EvalError::Argument("budget must be at least 1".into()));
    }
    for r in space {
        let ok = r.low <= r.high && r.low.is_finite() && r.high.is_finite();
        if !ok || (r.scale == ParamScale::Log && r.low <= 0.0) {
            return Err(EvalError::Argument(format!("bad range for {}", r.name)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..budget)
        .map(|_| space.iter().map(|r| (r.name.clone(), r.sample(&mut rng))).collect())
        .collect())
}

fn finish<E: fmt::Display>(params: Vec<Params>, outcomes: Vec<Result<f64, E>>) -> SearchResult {
    let trials: Vec<Trial> = params
        .into_iter()
        .zip(outcomes)
        .enumerate()
        .map(|(index, (params, outcome))| match outcome {
            Ok(s) if !s.is_nan() => Trial {
                index,
                params,
                score: s,
                error: None,
            },
            Ok(_) => Trial {
                index,
                params,
                score: f64::NEG_INFINITY,
                error: Some("objective returned NaN".into()),
            },
            Err(e) => Trial {
                index,
                params,
                score: f64::NEG_INFINITY,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.score > trials[best].score {
            best = i;
        }
    }
    SearchResult {
        best: trials[best].clone(),
        trials,
    }
}

/// Seeded random search maximizing `objective`. A failing trial scores -inf.
pub fn random_search<F, E>(space: &[ParamRange], budget: usize, seed: u64, mut objective: F) -> Result<SearchResult, EvalError>
where
    F: FnMut(&Params) -> Result<f64, E>,
    E: fmt::Display,
{
    let params = sample_trials(space, budget, seed)?;
    let outcomes = params.iter().map(&mut objective).collect();
    Ok(finish(params, outcomes))
}

/// Same trial sequence as [`random_search`], evaluated on the rayon pool.
pub fn random_search_parallel<F, E>(space: &[ParamRange], budget: usize, seed: u64, objective: F) -> Result<SearchResult, EvalError>
where
    F: Fn(&Params) -> Result<f64, E> + Sync,
    E: fmt::Display + Send,
{
    let params = sample_trials(space, budget, seed)?;
    let outcomes = params.par_iter().map(&objective).collect();
    Ok(finish(params, outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionTuning {
    pub params: DetectionParams,
    pub f1: f64,
    pub search: SearchResult,
}

/// Random search over `scale in [0.05, 0.5]`, `min_area_ratio in [0.1, 0.9]`
/// maximizing the pooled F1 at `tau`.
pub fn tune_detection(
    corpus: &[(Image16, Vec<BoundingBox>)],
    budget: usize,
    tau: f64,
    seed: u64,
) -> Result<DetectionTuning, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::Empty);
    }
    let space = [
        ParamRange::linear("scale", 0.05, 0.5),
        ParamRange::linear("min_area_ratio", 0.1, 0.9),
    ];
    let search = random_search_parallel(&space, budget, seed, |p| -> Result<f64, EvalError> {
        let params = DetectionParams {
            scale: p["scale"],
            min_area_ratio: p["min_area_ratio"],
        };
        Ok(corpus_detection_scores(corpus, &params, tau).f1)
    })?;
    Ok(DetectionTuning {
        params: DetectionParams {
            scale: search.best.params["scale"],
            min_area_ratio: search.best.params["min_area_ratio"],
        },
        f1: search.best.score,
        search,
    })
}

// ---------------------------------------------------------------------------
// Reports

/// One test-set prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub fold: usize,
    pub p_rel: f64,
    pub p_rel_hat: f64,
    pub p_nom: f64,
    pub module_type: String,
    pub current_level: CurrentLevel,
    pub setting: Setting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mae_wp: f64,
    pub rmse_wp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    #[serde(flatten)]
    pub metrics: GroupMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub module_type: String,
    pub current_level: CurrentLevel,
    pub setting: Setting,
    #[serde(flatten)]
    pub metrics: GroupMetrics,
    /// Standard deviation of the per-fold MAE within this subset.
    pub mae_fold_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_form: RmseForm,
    /// Pooled over every test prediction.
    pub overall: GroupMetrics,
    pub folds: Vec<FoldMetrics>,
    pub mae_fold_mean: f64,
    pub mae_fold_std: f64,
    pub rmse_fold_mean: f64,
    pub rmse_fold_std: f64,
    pub subsets: Vec<SubsetMetrics>,
}

fn group_metrics(records: &[&PredictionRecord], form: RmseForm) -> Result<GroupMetrics, EvalError> {
    let truth: Vec<f64> = records.iter().map(|r| r.p_rel).collect();
    let pred: Vec<f64> = records.iter().map(|r| r.p_rel_hat).collect();
    let truth_wp: Vec<f64> = records.iter().map(|r| r.p_rel * r.p_nom).collect();
    let pred_wp: Vec<f64> = records.iter().map(|r| r.p_rel_hat * r.p_nom).collect();
    Ok(GroupMetrics {
        n: records.len(),
        mae: mae(&truth, &pred)?,
        rmse: rmse(&truth, &pred, form)?,
        mae_wp: mae(&truth_wp, &pred_wp)?,
        rmse_wp: rmse(&truth_wp, &pred_wp, form)?,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Aggregates test predictions overall, per fold and per
/// (module type, current level, setting) subset.
pub fn metrics_report(records: &[PredictionRecord], form: RmseForm) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let all: Vec<&PredictionRecord> = records.iter().collect();
    let overall = group_metrics(&all, form)?;

    let mut by_fold: BTreeMap<usize, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_fold.entry(r.fold).or_default().push(r);
    }
    let folds = by_fold
        .iter()
        .map(|(&fold, rs)| Ok(FoldMetrics { fold, metrics: group_metrics(rs, form)? }))
        .collect::<Result<Vec<_>, EvalError>>()?;
    let (mae_fold_mean, mae_fold_std) = mean_std(&folds.iter().map(|f| f.metrics.mae).collect::<Vec<_>>());
    let (rmse_fold_mean, rmse_fold_std) = mean_std(&folds.iter().map(|f| f.metrics.rmse).collect::<Vec<_>>());

    let mut by_subset: BTreeMap<(String, CurrentLevel, Setting), Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_subset
            .entry((r.module_type.clone(), r.current_level, r.setting))
            .or_default()
            .push(r);
    }
    let subsets = by_subset
        .into_iter()
        .map(|((module_type, current_level, setting), rs)| {
            let mut per_fold: BTreeMap<usize, Vec<&PredictionRecord>> = BTreeMap::new();
            for r in &rs {
                per_fold.entry(r.fold).or_default().push(r);
            }
            let fold_mae = per_fold
                .values()
                .map(|v| group_metrics(v, form).map(|m| m.mae))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SubsetMetrics {
                module_type,
                current_level,
                setting,
                metrics: group_metrics(&rs, form)?,
                mae_fold_std: mean_std(&fold_mae).1,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    Ok(MetricsReport {
        rmse_form: form,
        overall,
        folds,
        mae_fold_mean,
        mae_fold_std,
        rmse_fold_mean,
        rmse_fold_std,
        subsets,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, label: &str, m: &GroupMetrics| {
            writeln!(
                f,
                "{label:<24} {:>6} {:>9.3} {:>9.3} {:>9.2} {:>9.2}",
                m.n,
                100.0 * m.mae,
                100.0 * m.rmse,
                m.mae_wp,
                m.rmse_wp
            )
        };
        writeln!(
            f,
            "{:<24} {:>6} {:>9} {:>9} {:>9} {:>9}",
            "subset", "N", "MAE[%]", "RMSE[%]", "MAE[Wp]", "RMSE[Wp]"
        )?;
        row(f, "all", &self.overall)?;
        for fold in &self.folds {
            row(f, &format!("fold {}", fold.fold), &fold.metrics)?;
        }
        for s in &self.subsets {
            row(
                f,
                &format!("{}/{}/{}", s.module_type, s.current_level, s.setting),
                &s.metrics,
            )?;
        }
        writeln!(
            f,
            "fold MAE {:.3} +- {:.3} %   (RMSE form: {:?})",
            100.0 * self.mae_fold_mean,
            100.0 * self.mae_fold_std,
            self.rmse_form
        )
    }
}
