//! Feature-based regression baseline: mean/std features, per-dimension
//! standardization and an epsilon-insensitive support vector regressor with an
//! RBF kernel, trained by sequential minimal optimization.
//!
//! The dual is solved in the usual 2n-variable form
//!
//! ```text
//! min_b  1/2 b'Qb + p'b   s.t.  sum_t s_t b_t = 0,  0 <= b_t <= C
//! ```
//!
//! with `b = [alpha; alpha*]`, `s_t = +1` for the first half and `-1` for the
//! second, `Q_tu = s_t s_u K(x_t, x_u)` and `p = [eps - y; eps + y]`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::Image16;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("feature dimension {0} is constant in the training data")]
    ConstantFeature(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid hyperparameter: {0}")]
    Param(String),
    #[error("problem too large for the reference solver ({0} samples, max 30)")]
    OracleSize(usize),
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error("feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Image mean and population standard deviation, in raw counts.
pub fn extract_mean_std(img: &Image16) -> FeatureVector {
    let n = img.data().len() as f64;
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    FeatureVector(vec![mean, var.sqrt()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    /// Per-dimension mean and population standard deviation of the training set.
    pub fn fit(train: &[FeatureVector]) -> Result<Self, RegressError> {
        if train.len() < 2 {
            return Err(RegressError::TooFewSamples {
                need: 2,
                got: train.len(),
            });
        }
        let d = train[0].len();
        check_dims(train, d)?;
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for f in train {
            for (m, v) in mean.iter_mut().zip(&f.0) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for f in train {
            for ((s, v), m) in std.iter_mut().zip(&f.0).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (k, s) in std.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if !(*s > 0.0) {
                return Err(RegressError::ConstantFeature(k));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, f: &FeatureVector) -> Result<FeatureVector, RegressError> {
        if f.len() != self.mean.len() {
            return Err(RegressError::Dimension {
                expected: self.mean.len(),
                got: f.len(),
            });
        }
        Ok(FeatureVector(
            f.0.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
        ))
    }

    pub fn invert(&self, f: &FeatureVector) -> Result<FeatureVector, RegressError> {
        if f.len() != self.mean.len() {
            return Err(RegressError::Dimension {
                expected: self.mean.len(),
                got: f.len(),
            });
        }
        Ok(FeatureVector(
            f.0.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| v * s + m)
                .collect(),
        ))
    }
}

fn check_dims(x: &[FeatureVector], d: usize) -> Result<(), RegressError> {
    for f in x {
        if f.len() != d {
            return Err(RegressError::Dimension {
                expected: d,
                got: f.len(),
            });
        }
        if !f.is_finite() {
            return Err(RegressError::NonFinite("features"));
        }
    }
    Ok(())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(-gamma * |a - b|^2)`
pub fn rbf_kernel(a: &FeatureVector, b: &FeatureVector, gamma: f64) -> Result<f64, RegressError> {
    if a.len() != b.len() {
        return Err(RegressError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    if !(gamma > 0.0) {
        return Err(RegressError::Param(format!("gamma {gamma}")));
    }
    Ok((-gamma * sq_dist(&a.0, &b.0)).exp())
}

/// RBF width; `Scale` resolves to `1 / (d * var(x))` over the training features.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    #[default]
    Scale,
    Value(f64),
}

impl Gamma {
    pub fn resolve(&self, x: &[FeatureVector]) -> f64 {
        match *self {
            Gamma::Value(g) => g,
            Gamma::Scale => {
                let d = x.first().map_or(1, FeatureVector::len).max(1);
                let values: Vec<f64> = x.iter().flat_map(|f| f.0.iter().copied()).collect();
                let n = values.len().max(1) as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    1.0 / (d as f64 * var)
                } else {
                    1.0 / d as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub c: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub gamma: Gamma,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Iteration cap in units of `n` pair updates.
    #[serde(default = "default_max_passes")]
    pub max_passes: usize,
}

fn default_tol() -> f64 {
    1e-3
}

fn default_max_passes() -> usize {
    10_000
}

impl SvrParams {
    pub fn new(c: f64, epsilon: f64, gamma: Gamma) -> Self {
        Self {
            c,
            epsilon,
            gamma,
            tol: default_tol(),
            max_passes: default_max_passes(),
        }
    }

    fn validate(&self) -> Result<(), RegressError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(RegressError::Param(format!("C = {}", self.c)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(RegressError::Param(format!("epsilon = {}", self.epsilon)));
        }
        if let Gamma::Value(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(RegressError::Param(format!("gamma = {g}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(RegressError::Param(format!("tol = {}", self.tol)));
        }
        Ok(())
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub format_version: u32,
    pub support_vectors: Vec<FeatureVector>,
    /// `alpha - alpha*` per support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    pub epsilon: f64,
    /// Applied to raw features before the kernel, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<FeatureNormalizer>,
}

impl SvrModel {
    pub fn dim(&self) -> Option<usize> {
        self.support_vectors
            .first()
            .map(FeatureVector::len)
            .or_else(|| self.normalizer.as_ref().map(|n| n.mean.len()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RegressError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RegressError> {
        let model: SvrModel = serde_json::from_slice(&fs::read(path)?)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(RegressError::Version(model.format_version));
        }
        Ok(model)
    }
}

/// Outcome of [`svr_fit`]. A fit that hit the iteration cap is still returned,
/// with `converged == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrFit {
    pub model: SvrModel,
    pub iterations: usize,
    pub converged: bool,
    /// Final maximal KKT violation `m(b) - M(b)`.
    pub violation: f64,
    /// Dual objective (maximization form) at the solution.
    pub dual_objective: f64,
    /// `alpha - alpha*` for every training sample, including zeros.
    pub coefficients: Vec<f64>,
}

fn kernel_matrix(x: &[FeatureVector], gamma: f64) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
        for j in 0..i {
            let v = (-gamma * sq_dist(&x[i].0, &x[j].0)).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Dual objective in maximization form for coefficients `alpha`, `alpha*`:
/// `-1/2 d'Kd - eps * sum(alpha + alpha*) + y'd` with `d = alpha - alpha*`.
pub fn dual_objective(
    x: &[FeatureVector],
    y: &[f64],
    alpha: &[f64],
    alpha_star: &[f64],
    epsilon: f64,
    gamma: f64,
) -> f64 {
    let n = x.len();
    let k = kernel_matrix(x, gamma);
    let d: Vec<f64> = alpha.iter().zip(alpha_star).map(|(a, s)| a - s).collect();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += d[i] * d[j] * k[i * n + j];
        }
    }
    let lin: f64 = (0..n)
        .map(|i| -epsilon * (alpha[i] + alpha_star[i]) + y[i] * d[i])
        .sum();
    -0.5 * quad + lin
}

struct Smo<'a> {
    n: usize,
    k: &'a [f64],
    c: f64,
    beta: Vec<f64>,
    grad: Vec<f64>,
}

impl Smo<'_> {
    #[inline]
    fn sign(&self, t: usize) -> f64 {
        if t < self.n {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    fn q(&self, t: usize, u: usize) -> f64 {
        self.sign(t) * self.sign(u) * self.k[(t % self.n) * self.n + u % self.n]
    }

    /// Working pair `(i, j, m - M)`: `i` is the maximal violator in the up set,
    /// `j` maximizes the second-order objective decrease against `i`.
    fn select(&self) -> Option<(usize, usize, f64)> {
        let (n, c) = (self.n, self.c);
        let (bp, bm) = self.beta.split_at(n);
        let (gp, gm) = self.grad.split_at(n);
        let (mut i, mut gmax) = (usize::MAX, f64::NEG_INFINITY);
        for u in 0..n {
            if bp[u] < c && -gp[u] > gmax {
                gmax = -gp[u];
                i = u;
            }
            if bm[u] > 0.0 && gm[u] > gmax {
                gmax = gm[u];
                i = u + n;
            }
        }
        if i == usize::MAX {
            return None;
        }
        let row = &self.k[(i % n) * n..(i % n + 1) * n];
        let kii = row[i % n];
        let (mut j, mut gmin, mut best) = (usize::MAX, f64::INFINITY, f64::INFINITY);
        let mut consider = |t: usize, u: usize, v: f64| {
            gmin = gmin.min(v);
            let b = gmax - v;
            if b > 0.0 {
                let a = (kii + self.k[u * (n + 1)] - 2.0 * row[u]).max(1e-12);
                let decrease = -b * b / a;
                if decrease <= best {
                    best = decrease;
                    j = t;
                }
            }
        };
        for u in 0..n {
            if bp[u] > 0.0 {
                consider(u, u, -gp[u]);
            }
            if bm[u] < c {
                consider(u + n, u, gm[u]);
            }
        }
        (j != usize::MAX).then_some((i, j, gmax - gmin))
    }

    fn update(&mut self, i: usize, j: usize) {
        let c = self.c;
        let (old_i, old_j) = (self.beta[i], self.beta[j]);
        let (mut bi, mut bj) = (old_i, old_j);
        let qii = self.q(i, i);
        let qjj = self.q(j, j);
        let qij = self.q(i, j);
        if self.sign(i) != self.sign(j) {
            let mut quad = qii + qjj + 2.0 * qij;
            if quad <= 0.0 {
                quad = 1e-12;
            }
            let delta = (-self.grad[i] - self.grad[j]) / quad;
            let diff = bi - bj;
            bi += delta;
            bj += delta;
            if diff > 0.0 {
                if bj < 0.0 {
                    bj = 0.0;
                    bi = diff;
                }
            } else if bi < 0.0 {
                bi = 0.0;
                bj = -diff;
            }
            if diff > 0.0 {
                if bi > c {
                    bi = c;
                    bj = c - diff;
                }
            } else if bj > c {
                bj = c;
                bi = c + diff;
            }
        } else {
            let mut quad = qii + qjj - 2.0 * qij;
            if quad <= 0.0 {
                quad = 1e-12;
            }
            let delta = (self.grad[i] - self.grad[j]) / quad;
            let sum = bi + bj;
            bi -= delta;
            bj += delta;
            if sum > c {
                if bi > c {
                    bi = c;
                    bj = sum - c;
                }
            } else if bj < 0.0 {
                bj = 0.0;
                bi = sum;
            }
            if sum > c {
                if bj > c {
                    bj = c;
                    bi = sum - c;
                }
            } else if bi < 0.0 {
                bi = 0.0;
                bj = sum;
            }
        }
        let (new_i, new_j) = (bi, bj);
        self.beta[i] = new_i;
        self.beta[j] = new_j;
        let (di, dj) = (new_i - old_i, new_j - old_j);
        if di != 0.0 || dj != 0.0 {
            let n = self.n;
            let (wi, wj) = (self.sign(i) * di, self.sign(j) * dj);
            let ki = &self.k[(i % n) * n..(i % n + 1) * n];
            let kj = &self.k[(j % n) * n..(j % n + 1) * n];
            let (up, down) = self.grad.split_at_mut(n);
            for u in 0..n {
                let delta = ki[u] * wi + kj[u] * wj;
                up[u] += delta;
                down[u] -= delta;
            }
        }
    }

    /// Offset `rho` such that the decision function is `sum d_i K - rho`.
    fn rho(&self) -> f64 {
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut sum_free, mut n_free) = (0.0, 0usize);
        for t in 0..2 * self.n {
            let s = self.sign(t);
            let yg = s * self.grad[t];
            if self.beta[t] >= self.c {
                if s < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if self.beta[t] <= 0.0 {
                if s > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                sum_free += yg;
                n_free += 1;
            }
        }
        if n_free > 0 {
            sum_free / n_free as f64
        } else {
            0.5 * (ub + lb)
        }
    }
}

/// Trains an epsilon-SVR with maximal-violating-pair SMO.
pub fn svr_fit(x: &[FeatureVector], y: &[f64], params: &SvrParams) -> Result<SvrFit, RegressError> {
    params.validate()?;
    if x.is_empty() {
        return Err(RegressError::TooFewSamples { need: 1, got: 0 });
    }
    if x.len() != y.len() {
        return Err(RegressError::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d = x[0].len();
    check_dims(x, d)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RegressError::NonFinite("targets"));
    }
    let gamma = params.gamma.resolve(x);
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(RegressError::Param(format!("gamma = {gamma}")));
    }
    let n = x.len();
    let k = kernel_matrix(x, gamma);
    let mut grad = Vec::with_capacity(2 * n);
    grad.extend(y.iter().map(|&t| params.epsilon - t));
    grad.extend(y.iter().map(|&t| params.epsilon + t));
    let p = grad.clone();
    let mut smo = Smo {
        n,
        k: &k,
        c: params.c,
        beta: vec![0.0; 2 * n],
        grad,
    };

    let max_iter = params.max_passes.saturating_mul(n.max(1));
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    let mut converged = false;
    while iterations < max_iter {
        let Some((i, j, gap)) = smo.select() else {
            violation = 0.0;
            converged = true;
            break;
        };
        violation = gap;
        if gap < params.tol {
            converged = true;
            break;
        }
        smo.update(i, j);
        iterations += 1;
    }
    if !converged {
        violation = smo.select().map_or(0.0, |s| s.2);
        converged = violation < params.tol;
        if !converged {
            log::warn!("SMO stopped after {iterations} iterations, KKT violation {violation:.3e}");
        }
    }

    let rho = smo.rho();
    let minimized: f64 = (0..2 * n).map(|t| 0.5 * smo.beta[t] * (smo.grad[t] + p[t])).sum();
    let coefficients: Vec<f64> = (0..n).map(|i| smo.beta[i] - smo.beta[i + n]).collect();
    let (support_vectors, dual_coef) = coefficients
        .iter()
        .zip(x)
        .filter(|(c, _)| **c != 0.0)
        .map(|(c, f)| (f.clone(), *c))
        .unzip();
    Ok(SvrFit {
        model: SvrModel {
            format_version: MODEL_FORMAT_VERSION,
            support_vectors,
            dual_coef,
            bias: -rho,
            gamma,
            c: params.c,
            epsilon: params.epsilon,
            normalizer: None,
        },
        iterations,
        converged,
        violation,
        dual_objective: -minimized,
        coefficients,
    })
}

/// `sum_i d_i K(sv_i, f) + b`, normalizing `f` first when the model carries a normalizer.
pub fn svr_predict(model: &SvrModel, f: &FeatureVector) -> Result<f64, RegressError> {
    let owned;
    let f = match &model.normalizer {
        Some(norm) => {
            owned = norm.apply(f)?;
            &owned
        }
        None => f,
    };
    if let Some(d) = model.support_vectors.first().map(FeatureVector::len) {
        if d != f.len() {
            return Err(RegressError::Dimension {
                expected: d,
                got: f.len(),
            });
        }
    }
    let s: f64 = model
        .support_vectors
        .iter()
        .zip(&model.dual_coef)
        .map(|(sv, c)| c * (-model.gamma * sq_dist(&sv.0, &f.0)).exp())
        .sum();
    Ok(s + model.bias)
}

/// Dual solution of the reference solver.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub bias: f64,
    pub dual_objective: f64,
    /// Certified upper bound on `optimum - dual_objective`.
    pub gap: f64,
    pub iterations: usize,
}

impl OracleSolution {
    pub fn coefficients(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.alpha_star).map(|(a, s)| a - s).collect()
    }
}

/// Proximal step: `argmin 1/2 |b - z|^2 + shrink * |b|_1` over
/// `{|b_i| <= c, sum b_i = 0}`.
///
/// With multiplier `lambda` for the hyperplane, `b_i = clamp(soft(z_i - lambda), -c, c)`.
/// The residual `sum b_i` is piecewise linear and non-increasing in `lambda`,
/// so the root lies exactly between two sorted breakpoints.
fn prox_step(z: &[f64], c: f64, shrink: f64) -> Vec<f64> {
    let b = |v: f64, lambda: f64| {
        let u = v - lambda;
        (u.signum() * (u.abs() - shrink).max(0.0)).clamp(-c, c)
    };
    let at = |lambda: f64| -> f64 { z.iter().map(|&v| b(v, lambda)).sum() };
    let mut knots: Vec<f64> = z
        .iter()
        .flat_map(|v| [v - shrink - c, v - shrink, v + shrink, v + shrink + c])
        .collect();
    knots.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (0, knots.len() - 1);
    // invariant: at(knots[lo]) >= 0 >= at(knots[hi])
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if at(knots[mid]) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (fl, fh) = (at(knots[lo]), at(knots[hi]));
    let lambda = if fl == fh {
        knots[lo]
    } else {
        knots[lo] + (knots[hi] - knots[lo]) * fl / (fl - fh)
    };
    z.iter().map(|&v| b(v, lambda)).collect()
}

/// `min_b C * sum max(0, |r_i - b| - eps)`, attained at a breakpoint `r_i +- eps`.
fn best_bias(r: &[f64], c: f64, eps: f64) -> (f64, f64) {
    let loss = |b: f64| c * r.iter().map(|ri| ((ri - b).abs() - eps).max(0.0)).sum::<f64>();
    let mut best = (0.0, f64::INFINITY);
    for &ri in r {
        for b in [ri - eps, ri + eps] {
            let l = loss(b);
            if l < best.1 {
                best = (b, l);
            }
        }
    }
    best
}

struct Certificate {
    dual: f64,
    gap: f64,
    bias: f64,
}

/// Dual value of `beta`, and the primal value of the same `w` with its best bias.
fn certify(k: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, c: f64, eps: f64) -> Certificate {
    let kb = k * beta;
    let quad = beta.dot(&kb);
    let dual = -0.5 * quad + y.dot(beta) - eps * beta.iter().map(|b| b.abs()).sum::<f64>();
    let r: Vec<f64> = (0..y.len()).map(|i| y[i] - kb[i]).collect();
    let (bias, hinge) = best_bias(&r, c, eps);
    Certificate {
        dual,
        gap: 0.5 * quad + hinge - dual,
        bias,
    }
}

/// Re-solves the free coordinates exactly for the sign/bound pattern of `beta`.
fn polish(k: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, c: f64, eps: f64) -> Option<DVector<f64>> {
    let n = y.len();
    let tol = 1e-7 * c;
    let free: Vec<usize> = (0..n).filter(|&i| beta[i].abs() > tol && beta[i].abs() < c - tol).collect();
    let mut out = beta.map(|b| {
        if b.abs() <= tol {
            0.0
        } else if b.abs() >= c - tol {
            c * b.signum()
        } else {
            b
        }
    });
    let m = free.len();
    // [K_FF 1; 1' 0] [beta_F; b] = [y_F - eps s_F - K_FB beta_B; -sum beta_B]
    let mut a = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for (p, &i) in free.iter().enumerate() {
        for (q, &j) in free.iter().enumerate() {
            a[(p, q)] = k[(i, j)];
        }
        a[(p, m)] = 1.0;
        a[(m, p)] = 1.0;
        let fixed: f64 = (0..n).filter(|j| !free.contains(j)).map(|j| k[(i, j)] * out[j]).sum();
        rhs[p] = y[i] - eps * beta[i].signum() - fixed;
    }
    rhs[m] = -(0..n).filter(|j| !free.contains(j)).map(|j| out[j]).sum::<f64>();
    let sol = a.svd(true, true).solve(&rhs, 1e-14).ok()?;
    for (p, &i) in free.iter().enumerate() {
        let v = sol[p];
        if v.signum() != beta[i].signum() || v.abs() > c {
            return None;
        }
        out[i] = v;
    }
    (out.sum().abs() <= 1e-12 * c * n as f64).then_some(out)
}

/// Independent reference solver for small problems.
///
/// Accelerated projected gradient ascent on the dual in `beta = alpha - alpha*`
/// form, with an exact active-set re-solve whenever the bound pattern settles.
/// It stops once the primal/dual gap certifies the dual value to 1e-10
/// (relative to `max(1, |dual|)`).
pub fn qp_oracle(
    x: &[FeatureVector],
    y: &[f64],
    c: f64,
    epsilon: f64,
    gamma: f64,
) -> Result<OracleSolution, RegressError> {
    let n = x.len();
    if n > 30 {
        return Err(RegressError::OracleSize(n));
    }
    if n == 0 || y.len() != n {
        return Err(RegressError::TooFewSamples { need: 1, got: n });
    }
    let flat = kernel_matrix(x, gamma);
    let k = DMatrix::from_row_slice(n, n, &flat);
    let yv = DVector::from_column_slice(y);
    let lip = k.symmetric_eigenvalues().max().max(1e-12);
    let step = 1.0 / lip;
    let done = |cert: &Certificate| cert.gap <= 1e-10 * cert.dual.abs().max(1.0);

    let mut beta = DVector::zeros(n);
    let mut mom = beta.clone();
    let mut t = 1.0f64;
    let mut f_prev = certify(&k, &yv, &beta, c, epsilon).dual;
    let mut best = (beta.clone(), certify(&k, &yv, &beta, c, epsilon));
    let mut iterations = 0;
    let mut stalls = 0;
    while iterations < 1_000_000 && !done(&best.1) {
        iterations += 1;
        // gradient step on -1/2 b'Kb + y'b, prox of eps |b|_1 plus constraints
        let z = &mom + (&yv - &k * &mom) * step;
        let next = DVector::from_vec(prox_step(z.as_slice(), c, step * epsilon));
        let f_next = certify(&k, &yv, &next, c, epsilon).dual;
        let stalled = f_next <= f_prev;
        stalls = if stalled { stalls + 1 } else { 0 };
        if f_next < f_prev {
            // adaptive restart from the last accepted iterate
            t = 1.0;
            mom = beta.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            mom = &next + (&next - &beta) * ((t - 1.0) / t_next);
            t = t_next;
            beta = next;
            f_prev = f_next;
        }
        if iterations % 10 == 0 || stalled {
            let mut candidates = vec![beta.clone()];
            candidates.extend(polish(&k, &yv, &beta, c, epsilon));
            for cand in candidates {
                let cert = certify(&k, &yv, &cand, c, epsilon);
                if cert.gap < best.1.gap {
                    best = (cand, cert);
                }
            }
            // a plain step from the last iterate no longer improves it
            if stalled && stalls >= 2 {
                break;
            }
        }
    }
    let (beta, cert) = best;
    if !done(&cert) {
        log::warn!("oracle stopped with gap {:.3e}", cert.gap);
    }
    Ok(OracleSolution {
        alpha: beta.iter().map(|b| b.max(0.0)).collect(),
        alpha_star: beta.iter().map(|b| (-b).max(0.0)).collect(),
        bias: cert.bias,
        dual_objective: cert.dual,
        gap: cert.gap,
        iterations,
    })
}

/// Reads `sample_id,f0,f1,...`.
pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<(String, FeatureVector)>, RegressError> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.get(0) != Some("sample_id") || header.len() < 2 {
        return Err(RegressError::Format("header must start with sample_id".into()));
    }
    for (k, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{k}") {
            return Err(RegressError::Format(format!("unexpected column {name}")));
        }
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(0).unwrap_or_default().to_string();
        let values = record
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| RegressError::Format(format!("bad number {v:?} for {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push((id, FeatureVector(values)));
    }
    Ok(out)
}

pub fn write_feature_csv(path: impl AsRef<Path>, rows: &[(String, FeatureVector)]) -> Result<(), RegressError> {
    let d = rows.first().map_or(0, |r| r.1.len());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..d).map(|k| format!("f{k}")));
    writer.write_record(&header)?;
    for (id, f) in rows {
        if f.len() != d {
            return Err(RegressError::Dimension {
                expected: d,
                got: f.len(),
            });
        }
        let mut record = vec![id.clone()];
        record.extend(f.0.iter().map(|v| format!("{v:?}")));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
