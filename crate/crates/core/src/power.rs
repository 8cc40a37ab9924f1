//! Power bookkeeping, the inactive-area estimator and per-cell attribution of
//! nonpositive loss maps.
//!
//! A loss map holds the relative power loss contributed by each pixel, so the
//! module's relative power is `1 + sum(map)` and a cell's loss is the negated
//! sum over its extent.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{otsu_threshold, DetectError};
use crate::imagecore::Image16;

#[derive(Debug, Error)]
pub enum PowerError {
    #[error("nominal power must be positive, got {0}")]
    NominalPower(f64),
    #[error("loss map has positive entry {value} at index {index}")]
    PositiveLoss { index: usize, value: f64 },
    #[error("non-finite loss map entry at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("need at least two samples with varying inactive fraction")]
    SingularFit,
    #[error("no healthy maps supplied")]
    NoHealthyMaps,
    #[error("bad PLM file: {0}")]
    Format(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Upper clamp of area-model predictions, in relative power.
pub const MAX_RELATIVE_POWER: f64 = 1.1;

/// Tolerance for positive entries in a loss map.
pub const POSITIVE_TOLERANCE: f64 = 1e-9;

/// `P_mpp = p_rel * P_nom`
pub fn to_watts(p_rel: f64, p_nom: f64) -> Result<f64, PowerError> {
    if !(p_nom > 0.0) || !p_nom.is_finite() {
        return Err(PowerError::NominalPower(p_nom));
    }
    Ok(p_rel * p_nom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    pub p_rel_hat: f64,
    pub p_mpp_hat: f64,
    pub p_nom: f64,
}

impl PowerEstimate {
    pub fn new(p_rel_hat: f64, p_nom: f64) -> Result<Self, PowerError> {
        Ok(Self {
            p_rel_hat,
            p_mpp_hat: to_watts(p_rel_hat, p_nom)?,
            p_nom,
        })
    }
}

/// How pixels are classified as inactive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "threshold")]
pub enum InactiveThreshold {
    /// Otsu threshold of the module image itself.
    #[default]
    Otsu,
    /// Fixed intensity; pixels at or below it are inactive.
    Fixed(u16),
}

fn inactive_cutoff(img: &Image16, method: InactiveThreshold) -> Result<u16, PowerError> {
    Ok(match method {
        InactiveThreshold::Otsu => otsu_threshold(img)?,
        InactiveThreshold::Fixed(t) => t,
    })
}

/// Fraction of pixels at or below the inactive threshold.
pub fn inactive_fraction(img: &Image16, method: InactiveThreshold) -> Result<f64, PowerError> {
    let cutoff = inactive_cutoff(img, method)?;
    let dark = img.data().iter().filter(|&&v| v <= cutoff).count();
    Ok(dark as f64 / img.data().len() as f64)
}

/// Linear model `p_rel = intercept - slope * fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaModel {
    pub slope: f64,
    pub intercept: f64,
}

impl AreaModel {
    pub fn predict(&self, fraction: f64) -> f64 {
        (self.intercept - self.slope * fraction).clamp(0.0, MAX_RELATIVE_POWER)
    }
}

/// Least-squares fit with a free intercept, or with the intercept pinned to
/// `fixed_intercept`. A negative slope is clamped to 0 (refitting the intercept
/// when it is free), so larger inactive areas never predict more power.
pub fn fit_area_model(
    fractions: &[f64],
    p_rel: &[f64],
    fixed_intercept: Option<f64>,
) -> Result<AreaModel, PowerError> {
    if fractions.len() != p_rel.len() {
        return Err(PowerError::Dimension(format!(
            "{} fractions vs {} targets",
            fractions.len(),
            p_rel.len()
        )));
    }
    let n = fractions.len();
    if n < 2 {
        return Err(PowerError::SingularFit);
    }
    let nf = n as f64;
    let mx = fractions.iter().sum::<f64>() / nf;
    let my = p_rel.iter().sum::<f64>() / nf;
    let sxx: f64 = fractions.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return Err(PowerError::SingularFit);
    }
    match fixed_intercept {
        None => {
            let sxy: f64 = fractions
                .iter()
                .zip(p_rel)
                .map(|(x, y)| (x - mx) * (y - my))
                .sum();
            let slope = (-sxy / sxx).max(0.0);
            Ok(AreaModel {
                slope,
                intercept: my + slope * mx,
            })
        }
        Some(b) => {
            // minimize sum (b - k x - y)^2 over k
            let sxx0: f64 = fractions.iter().map(|x| x * x).sum();
            let sxy0: f64 = fractions.iter().zip(p_rel).map(|(x, y)| x * (b - y)).sum();
            Ok(AreaModel {
                slope: (sxy0 / sxx0).max(0.0),
                intercept: b,
            })
        }
    }
}

pub fn predict_area_model(model: &AreaModel, fraction: f64) -> f64 {
    model.predict(fraction)
}

/// Per-pixel relative power loss, row-major, every entry `<= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LossMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, PowerError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(PowerError::Dimension(format!(
                "{width}x{height} map with {} values",
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(PowerError::NonFinite(i));
            }
            if v > POSITIVE_TOLERANCE {
                return Err(PowerError::PositiveLoss { index: i, value: v });
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self, PowerError> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sum over all pixels; `1 + sum` is the relative power.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `1 + sum(map)`.
pub fn total_loss_from_map(map: &LossMap) -> f64 {
    1.0 + map.sum()
}

// Lower median: always an element of the set, so re-running the debias with
// debiased healthy maps subtracts exactly zero.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Per-pixel (lower) median of the healthy maps.
pub fn healthy_median(healthy: &[LossMap]) -> Result<Vec<f64>, PowerError> {
    let first = healthy.first().ok_or(PowerError::NoHealthyMaps)?;
    for m in healthy {
        if m.width != first.width || m.height != first.height {
            return Err(PowerError::Dimension(format!(
                "healthy map {}x{} vs {}x{}",
                m.width, m.height, first.width, first.height
            )));
        }
    }
    let mut column = Vec::with_capacity(healthy.len());
    Ok((0..first.data.len())
        .map(|i| {
            column.clear();
            column.extend(healthy.iter().map(|m| m.data[i]));
            median(&mut column)
        })
        .collect())
}

/// Subtracts the per-pixel median of `healthy` from every map and clamps the
/// result to `<= 0`.
pub fn debias_maps(maps: &[LossMap], healthy: &[LossMap]) -> Result<Vec<LossMap>, PowerError> {
    let bias = healthy_median(healthy)?;
    maps.iter()
        .map(|m| {
            if m.data.len() != bias.len() || m.width != healthy[0].width {
                return Err(PowerError::Dimension(format!(
                    "map {}x{} vs healthy {}x{}",
                    m.width, m.height, healthy[0].width, healthy[0].height
                )));
            }
            let data = m
                .data
                .iter()
                .zip(&bias)
                .map(|(v, b)| (v - b).min(0.0))
                .collect();
            LossMap::new(m.width, m.height, data)
        })
        .collect()
}

/// Cell layout over a map; the last row and column absorb remainder pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGrid {
    pub rows: usize,
    pub cols: usize,
}

impl CellGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self, PowerError> {
        if rows == 0 || cols == 0 {
            return Err(PowerError::Dimension(format!("{rows}x{cols} grid")));
        }
        Ok(Self { rows, cols })
    }

    /// `[lo, hi)` pixel span of cell `index` along an axis of `len` pixels split into `n` cells.
    fn span(index: usize, n: usize, len: usize) -> (usize, usize) {
        let step = len / n;
        let lo = index * step;
        let hi = if index + 1 == n { len } else { lo + step };
        (lo, hi)
    }

    /// Pixel extent `(x0, y0, x1, y1)` of cell `(row, col)` in a `width x height` map.
    pub fn cell_extent(&self, row: usize, col: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (x0, x1) = Self::span(col, self.cols, width);
        let (y0, y1) = Self::span(row, self.rows, height);
        (x0, y0, x1, y1)
    }
}

/// Power lost in each cell, row-major, in the unit of `p_nom`.
pub fn cell_losses(map: &LossMap, grid: &CellGrid, p_nom: f64) -> Result<Vec<f64>, PowerError> {
    if grid.rows > map.height || grid.cols > map.width {
        return Err(PowerError::Dimension(format!(
            "{}x{} grid on a {}x{} map",
            grid.rows, grid.cols, map.width, map.height
        )));
    }
    if !(p_nom > 0.0) {
        return Err(PowerError::NominalPower(p_nom));
    }
    let mut out = Vec::with_capacity(grid.rows * grid.cols);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (x0, y0, x1, y1) = grid.cell_extent(r, c, map.width, map.height);
            let mut s = 0.0;
            for y in y0..y1 {
                s += map.data[y * map.width + x0..y * map.width + x1].iter().sum::<f64>();
            }
            out.push(-s * p_nom);
        }
    }
    Ok(out)
}

const PLM_MAGIC: &[u8; 4] = b"PLM1";

pub fn encode_loss_map(map: &LossMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + map.data.len() * 8);
    out.extend_from_slice(PLM_MAGIC);
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_loss_map(bytes: &[u8]) -> Result<LossMap, PowerError> {
    if bytes.len() < 12 {
        return Err(PowerError::Format("header truncated".into()));
    }
    if &bytes[..4] != PLM_MAGIC {
        return Err(PowerError::Format("bad magic".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| PowerError::Format("dimension overflow".into()))?;
    let payload = &bytes[12..];
    if payload.len() != expected {
        return Err(PowerError::Format(format!(
            "expected {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    LossMap::new(width, height, data)
}

pub fn load_loss_map(path: impl AsRef<Path>) -> Result<LossMap, PowerError> {
    decode_loss_map(&fs::read(path)?)
}

pub fn save_loss_map(map: &LossMap, path: impl AsRef<Path>) -> Result<(), PowerError> {
    fs::write(path, encode_loss_map(map))?;
    Ok(())
}

/// Loss map from the inactive-area estimator: every inactive pixel carries the
/// same negative share so the map total equals `predict(fraction) - 1`.
///
/// If the model predicts no loss (or a gain), the map is all zeros.
pub fn synth_loss_map(
    img: &Image16,
    method: InactiveThreshold,
    model: &AreaModel,
) -> Result<LossMap, PowerError> {
    let cutoff = inactive_cutoff(img, method)?;
    let inactive: Vec<bool> = img.data().iter().map(|&v| v <= cutoff).collect();
    let count = inactive.iter().filter(|&&b| b).count();
    let fraction = count as f64 / inactive.len() as f64;
    let total = (model.predict(fraction) - 1.0).min(0.0);
    let data = if count == 0 || total == 0.0 {
        vec![0.0; inactive.len()]
    } else {
        let share = total / count as f64;
        inactive.iter().map(|&b| if b { share } else { 0.0 }).collect()
    };
    LossMap::new(img.width(), img.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn watts_examples() {
        assert_eq!(to_watts(1.0, 230.0).unwrap(), 230.0);
        assert_eq!(to_watts(0.9, 230.0).unwrap(), 207.0);
        assert_eq!(to_watts(0.0, 170.0).unwrap(), 0.0);
        assert!(to_watts(0.9, 0.0).is_err());
        let e = PowerEstimate::new(0.87, 240.0).unwrap();
        assert_eq!(e.p_mpp_hat, 0.87 * 240.0);
    }

    #[test]
    fn inactive_fraction_examples() {
        let bright = Image16::filled(10, 10, 3000).unwrap();
        assert_eq!(inactive_fraction(&bright, InactiveThreshold::Fixed(1000)).unwrap(), 0.0);
        let dark = Image16::filled(10, 10, 200).unwrap();
        assert_eq!(inactive_fraction(&dark, InactiveThreshold::Fixed(1000)).unwrap(), 1.0);
        assert!(inactive_fraction(&dark, InactiveThreshold::Otsu).is_err());

        let mut img = Image16::filled(20, 10, 3000).unwrap();
        for x in 0..20 {
            img.set(x, 3, 250);
        }
        assert_eq!(inactive_fraction(&img, InactiveThreshold::Otsu).unwrap(), 0.1);
    }

    #[test]
    fn area_model_exact_line() {
        let f = [0.0, 0.1, 0.25, 0.4];
        let p: Vec<f64> = f.iter().map(|x| 1.0 - x).collect();
        let m = fit_area_model(&f, &p, None).unwrap();
        assert!((m.slope - 1.0).abs() < 1e-9);
        assert!((m.intercept - 1.0).abs() < 1e-9);
        assert!((predict_area_model(&m, 0.0) - 1.0).abs() < 1e-9);

        let m = fit_area_model(&f, &p, Some(1.0)).unwrap();
        assert!((m.slope - 1.0).abs() < 1e-12);
        assert_eq!(m.intercept, 1.0);
    }

    #[test]
    fn area_model_degenerate_and_clamped() {
        assert!(matches!(fit_area_model(&[0.2, 0.2], &[0.9, 0.8], None), Err(PowerError::SingularFit)));
        assert!(fit_area_model(&[0.2], &[0.9], None).is_err());
        // increasing power with inactive area is clamped to a flat model
        let m = fit_area_model(&[0.0, 0.5], &[0.8, 0.9], None).unwrap();
        assert_eq!(m.slope, 0.0);
        assert!((m.intercept - 0.85).abs() < 1e-12);
        let m = AreaModel { slope: 1.0, intercept: 1.3 };
        assert_eq!(m.predict(0.0), MAX_RELATIVE_POWER);
        assert_eq!(m.predict(2.0), 0.0);
    }

    #[test]
    fn map_totals() {
        assert_eq!(total_loss_from_map(&LossMap::zeros(4, 4).unwrap()), 1.0);
        let m = LossMap::new(2, 2, vec![-0.025; 4]).unwrap();
        assert!((total_loss_from_map(&m) - 0.9).abs() < 1e-15);
        assert!(matches!(
            LossMap::new(1, 2, vec![0.0, 0.1]),
            Err(PowerError::PositiveLoss { index: 1, .. })
        ));
        assert!(LossMap::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn debias_examples() {
        let healthy: Vec<LossMap> = (0..3).map(|_| LossMap::new(2, 2, vec![-0.001; 4]).unwrap()).collect();
        let out = debias_maps(&healthy, &healthy).unwrap();
        assert!(out.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));

        let single = LossMap::new(2, 1, vec![-0.01, -0.02]).unwrap();
        assert_eq!(healthy_median(std::slice::from_ref(&single)).unwrap(), vec![-0.01, -0.02]);
        let sick = LossMap::new(2, 1, vec![-0.05, -0.01]).unwrap();
        let out = debias_maps(&[sick], &[single]).unwrap();
        assert_eq!(out[0].data(), &[-0.04, 0.0]);

        assert!(matches!(debias_maps(&healthy, &[]), Err(PowerError::NoHealthyMaps)));
        let other = LossMap::zeros(3, 3).unwrap();
        assert!(debias_maps(&[other], &healthy).is_err());
    }

    #[test]
    fn debias_is_idempotent() {
        let healthy: Vec<LossMap> = (0..4)
            .map(|k| LossMap::new(3, 1, vec![-0.001 * k as f64, -0.002, -0.0005 * k as f64]).unwrap())
            .collect();
        let maps = vec![LossMap::new(3, 1, vec![-0.1, -0.003, 0.0]).unwrap()];
        let once_healthy = debias_maps(&healthy, &healthy).unwrap();
        let once = debias_maps(&maps, &healthy).unwrap();
        let twice = debias_maps(&once, &once_healthy).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn cell_loss_examples() {
        let grid = CellGrid::new(10, 6).unwrap();
        let zero = LossMap::zeros(60, 100).unwrap();
        assert_eq!(cell_losses(&zero, &grid, 230.0).unwrap(), vec![0.0; 60]);

        let uniform = LossMap::new(60, 100, vec![-0.06 / 6000.0; 6000]).unwrap();
        for v in cell_losses(&uniform, &grid, 230.0).unwrap() {
            assert!((v - 0.23).abs() < 1e-12);
        }

        let mut data = vec![-1e-9; 6000];
        for y in 20..30 {
            for x in 10..20 {
                data[y * 60 + x] = -0.001;
            }
        }
        let concentrated = LossMap::new(60, 100, data).unwrap();
        let losses = cell_losses(&concentrated, &grid, 1.0).unwrap();
        let total: f64 = losses.iter().sum();
        assert!(losses[2 * 6 + 1] >= 0.99 * total);

        assert!(cell_losses(&LossMap::zeros(3, 3).unwrap(), &grid, 230.0).is_err());
    }

    #[test]
    fn remainder_goes_to_last_cell() {
        let g = CellGrid::new(3, 2).unwrap();
        assert_eq!(g.cell_extent(0, 0, 7, 10), (0, 0, 3, 3));
        assert_eq!(g.cell_extent(2, 1, 7, 10), (3, 6, 7, 10));
    }

    #[test]
    fn plm_format() {
        let m = LossMap::new(3, 2, vec![-0.0, -1e-300, -0.5, -1.25, 0.0, -3.0]).unwrap();
        let bytes = encode_loss_map(&m);
        assert_eq!(&bytes[..4], b"PLM1");
        assert_eq!(&bytes[4..12], &[3, 0, 0, 0, 2, 0, 0, 0]);
        let back = decode_loss_map(&bytes).unwrap();
        assert_eq!(encode_loss_map(&back), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_loss_map(&bad).is_err());
        assert!(decode_loss_map(&bytes[..bytes.len() - 1]).is_err());
        let mut huge = bytes[..12].to_vec();
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_loss_map(&huge).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.plm");
        save_loss_map(&m, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
        assert_eq!(load_loss_map(&path).unwrap(), m);
    }

    #[test]
    fn synthesized_maps() {
        let model = AreaModel { slope: 1.0, intercept: 1.0 };
        let bright = Image16::filled(10, 10, 3000).unwrap();
        let m = synth_loss_map(&bright, InactiveThreshold::Fixed(1000), &model).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));

        let mut img = Image16::filled(20, 10, 3000).unwrap();
        for x in 0..20 {
            img.set(x, 7, 100);
        }
        let m = synth_loss_map(&img, InactiveThreshold::Otsu, &model).unwrap();
        assert!((m.sum() + 0.1).abs() < 1e-12);
        let fraction = inactive_fraction(&img, InactiveThreshold::Otsu).unwrap();
        assert!((total_loss_from_map(&m) - model.predict(fraction)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cell_losses_conserve_total(w in 1usize..40, h in 1usize..40, rows in 1usize..8, cols in 1usize..8,
                                      seed in any::<u64>()) {
            prop_assume!(rows <= h && cols <= w);
            let data: Vec<f64> = (0..w * h)
                .map(|i| -(((seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15)) >> 40) as f64) * 1e-9)
                .collect();
            let map = LossMap::new(w, h, data).unwrap();
            let losses = cell_losses(&map, &CellGrid::new(rows, cols).unwrap(), 1.0).unwrap();
            prop_assert!(losses.iter().all(|&v| v >= 0.0));
            let total: f64 = losses.iter().sum();
            prop_assert!((total - (1.0 - total_loss_from_map(&map))).abs() < 1e-12);
        }

        #[test]
        fn steeper_fraction_never_raises_power(f1 in 0.0f64..1.0, f2 in 0.0f64..1.0,
                                                fr in proptest::collection::vec(0.0f64..1.0, 3..10),
                                                noise in proptest::collection::vec(-0.2f64..0.2, 10)) {
            let p: Vec<f64> = fr.iter().zip(&noise).map(|(f, n)| 1.0 - 0.8 * f + n).collect();
            if let Ok(m) = fit_area_model(&fr, &p, None) {
                let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
                prop_assert!(m.predict(hi) <= m.predict(lo));
            }
        }

        #[test]
        fn plm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let data: Vec<f64> = (0..w * h)
                .map(|i| -f64::from_bits((seed.rotate_left(i as u32) & 0x3FEF_FFFF_FFFF_FFFF) | 1))
                .collect();
            let m = LossMap::new(w, h, data).unwrap();
            let back = decode_loss_map(&encode_loss_map(&m)).unwrap();
            for (a, b) in m.data().iter().zip(back.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
