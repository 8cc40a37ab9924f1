//! Perspective rectification of a detected module.
//!
//! Corners are found with an extremal-point heuristic on the binarized crop,
//! mapped to a canonical rectangle by a four-point DLT homography, and the crop
//! is resampled with bilinear interpolation.
//!
//! Pixel centers sit on integer coordinates throughout this module.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{connected_components, otsu_threshold, BinaryMask, BoundingBox, DetectError};
use crate::imagecore::{quantize, Image16, ImageError};

#[derive(Debug, Error)]
pub enum RectifyError {
    #[error("no foreground component found in crop")]
    NoForeground,
    #[error("degenerate quadrilateral (collinear or non-convex corners)")]
    DegenerateQuad,
    #[error("rank-deficient DLT system")]
    RankDeficient,
    #[error("homography is not invertible")]
    Singular,
    #[error("box {0:?} lies outside the {1}x{2} image")]
    BoxOutside(BoundingBox, usize, usize),
    #[error("invalid module geometry {rows}x{cols} at {cell_px} px per cell")]
    Geometry {
        rows: usize,
        cols: usize,
        cell_px: usize,
    },
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Point = (f64, f64);

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Corners ordered top-left, top-right, bottom-right, bottom-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    corners: [Point; 4],
}

impl Quad {
    pub fn new(corners: [Point; 4]) -> Result<Self, RectifyError> {
        if corners.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(RectifyError::DegenerateQuad);
        }
        let turns: Vec<f64> = (0..4)
            .map(|i| cross(corners[i], corners[(i + 1) % 4], corners[(i + 2) % 4]))
            .collect();
        let scale = corners
            .iter()
            .flat_map(|p| [p.0.abs(), p.1.abs()])
            .fold(1.0f64, f64::max);
        let tiny = 1e-12 * scale * scale;
        let all_pos = turns.iter().all(|&t| t > tiny);
        let all_neg = turns.iter().all(|&t| t < -tiny);
        if !(all_pos || all_neg) {
            return Err(RectifyError::DegenerateQuad);
        }
        Ok(Self { corners })
    }

    /// Axis-aligned rectangle with corners at `(0,0)` and `(w,h)`.
    pub fn rect(w: f64, h: f64) -> Result<Self, RectifyError> {
        Self::new([(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)])
    }

    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    fn mean_edge_lengths(&self) -> (f64, f64) {
        let d = |a: Point, b: Point| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let c = &self.corners;
        (
            0.5 * (d(c[0], c[1]) + d(c[3], c[2])),
            0.5 * (d(c[0], c[3]) + d(c[1], c[2])),
        )
    }
}

/// Projective map `x' ~ H x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Scales so that `H[(2,2)] = 1` when that entry is not ~0.
    pub fn normalized(m: Matrix3<f64>) -> Result<Self, RectifyError> {
        let m = if m[(2, 2)].abs() > 1e-15 {
            m / m[(2, 2)]
        } else {
            m / m.norm()
        };
        if !m.iter().all(|v| v.is_finite()) || m.determinant().abs() <= 1e-12 {
            return Err(RectifyError::Singular);
        }
        Ok(Self(m))
    }

    pub fn apply(&self, p: Point) -> Point {
        let v = self.0 * Vector3::new(p.0, p.1, 1.0);
        (v.x / v.z, v.y / v.z)
    }

    pub fn inverse(&self) -> Result<Self, RectifyError> {
        let inv = self.0.try_inverse().ok_or(RectifyError::Singular)?;
        Self::normalized(inv)
    }

    /// `self` after `first`, i.e. `self * first`.
    pub fn after(&self, first: &Homography) -> Result<Self, RectifyError> {
        Self::normalized(self.0 * first.0)
    }
}

/// Similarity that moves the centroid to the origin and sets mean distance to sqrt(2).
fn conditioning(points: &[Point; 4]) -> Matrix3<f64> {
    let cx = points.iter().map(|p| p.0).sum::<f64>() / 4.0;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / 4.0;
    let mean_d = points
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / 4.0;
    let s = std::f64::consts::SQRT_2 / mean_d;
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Four-point DLT with Hartley conditioning; the solution is the right singular
/// vector of the smallest singular value.
pub fn homography_dlt(src: &Quad, dst: &Quad) -> Result<Homography, RectifyError> {
    let ts = conditioning(&src.corners);
    let td = conditioning(&dst.corners);
    let cond = |t: &Matrix3<f64>, p: Point| {
        let v = t * Vector3::new(p.0, p.1, 1.0);
        (v.x / v.z, v.y / v.z)
    };

    // 8 equations, padded with a zero row so the SVD yields the full right basis
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..4 {
        let (x, y) = cond(&ts, src.corners[i]);
        let (u, v) = cond(&td, dst.corners[i]);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(RectifyError::RankDeficient)?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let largest = svd.singular_values[order[8]];
    // the padded row contributes one structural zero; a second one means rank < 8
    if svd.singular_values[order[1]] <= 1e-10 * largest {
        return Err(RectifyError::RankDeficient);
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or(RectifyError::Singular)?;
    Homography::normalized(td_inv * hn * ts)
}

/// Inverse-mapping warp; `h` maps source to destination coordinates.
/// Samples falling outside the source are 0.
pub fn warp(img: &Image16, h: &Homography, out_w: usize, out_h: usize) -> Result<Image16, RectifyError> {
    let inv = h.inverse()?;
    let (w, hgt) = (img.width(), img.height());
    let (max_x, max_y) = ((w - 1) as f64, (hgt - 1) as f64);
    const EDGE: f64 = 1e-9;
    let m = inv.0;
    let mut data = vec![0u16; out_w * out_h];
    for v in 0..out_h {
        for u in 0..out_w {
            let (uf, vf) = (u as f64, v as f64);
            let z = m[(2, 0)] * uf + m[(2, 1)] * vf + m[(2, 2)];
            let x = (m[(0, 0)] * uf + m[(0, 1)] * vf + m[(0, 2)]) / z;
            let y = (m[(1, 0)] * uf + m[(1, 1)] * vf + m[(1, 2)]) / z;
            if !(x >= -EDGE && y >= -EDGE && x <= max_x + EDGE && y <= max_y + EDGE) {
                continue;
            }
            let x = x.clamp(0.0, max_x);
            let y = y.clamp(0.0, max_y);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(hgt - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let p = |xx: usize, yy: usize| img.get(xx, yy) as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            data[v * out_w + u] = quantize(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Image16::new(out_w, out_h, data)?)
}

/// Square-window dilation (`fill = false`) or erosion (`fill = true`) along one axis.
fn morph_1d(line: &[bool], radius: usize, erode: bool) -> Vec<bool> {
    let n = line.len();
    let mut prefix = vec![0usize; n + 1];
    for (i, &b) in line.iter().enumerate() {
        prefix[i + 1] = prefix[i] + b as usize;
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(n);
            let count = prefix[hi] - prefix[lo];
            if erode {
                // outside the crop counts as foreground
                count == hi - lo
            } else {
                count > 0
            }
        })
        .collect()
}

fn morph(mask: &BinaryMask, radius: usize, erode: bool) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = mask.data.clone();
    for y in 0..h {
        let row = morph_1d(&out[y * w..(y + 1) * w], radius, erode);
        out[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    let mut column = vec![false; h];
    for x in 0..w {
        for y in 0..h {
            column[y] = out[y * w + x];
        }
        for (y, v) in morph_1d(&column, radius, erode).into_iter().enumerate() {
            out[y * w + x] = v;
        }
    }
    BinaryMask {
        width: w,
        height: h,
        data: out,
    }
}

/// Closing radius used by [`estimate_corners`]: 1% of the short side, at least 1 px.
pub fn default_closing_radius(width: usize, height: usize) -> usize {
    (width.min(height) / 100).max(1)
}

/// Extremal-corner estimate of the single module in `crop`.
///
/// The Otsu mask is closed with a square element so that dark cell gaps do not
/// split the module, then the largest component supplies the four points that
/// maximize `-x-y`, `x-y`, `x+y` and `-x+y`.
pub fn estimate_corners(crop: &Image16) -> Result<Quad, RectifyError> {
    estimate_corners_with(crop, default_closing_radius(crop.width(), crop.height()))
}

pub fn estimate_corners_with(crop: &Image16, closing_radius: usize) -> Result<Quad, RectifyError> {
    let threshold = match otsu_threshold(crop) {
        Ok(t) => t,
        Err(DetectError::ConstantImage) => return Err(RectifyError::NoForeground),
        Err(e) => return Err(e.into()),
    };
    let mut mask = BinaryMask::from_threshold(crop, threshold);
    if closing_radius > 0 {
        mask = morph(&morph(&mask, closing_radius, false), closing_radius, true);
    }
    let labels = connected_components(&mask);
    if labels.count == 0 {
        return Err(RectifyError::NoForeground);
    }
    let mut sizes = vec![0usize; labels.count + 1];
    for &l in &labels.labels {
        sizes[l as usize] += 1;
    }
    let largest = (1..=labels.count)
        .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
        .unwrap_or(1) as u32;

    let dirs: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let mut best = [(f64::NEG_INFINITY, (0.0, 0.0)); 4];
    for y in 0..labels.height {
        for x in 0..labels.width {
            if labels.labels[y * labels.width + x] != largest {
                continue;
            }
            let (xf, yf) = (x as f64, y as f64);
            for (slot, d) in best.iter_mut().zip(&dirs) {
                let s = d.0 * xf + d.1 * yf;
                if s > slot.0 {
                    *slot = (s, (xf, yf));
                }
            }
        }
    }
    Quad::new([best[0].1, best[1].1, best[2].1, best[3].1])
}

/// Cell layout of a module type; the rectified image is `cols * cell_px` wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleGeometry {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_cell_px")]
    pub cell_px: usize,
}

fn default_cell_px() -> usize {
    100
}

impl ModuleGeometry {
    pub fn new(rows: usize, cols: usize, cell_px: usize) -> Result<Self, RectifyError> {
        if rows == 0 || cols == 0 || cell_px == 0 {
            return Err(RectifyError::Geometry { rows, cols, cell_px });
        }
        Ok(Self { rows, cols, cell_px })
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.cols * self.cell_px, self.rows * self.cell_px)
    }
}

/// A rectified single-module measurement with its cell grid shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleImage {
    pub image: Image16,
    pub rows: usize,
    pub cols: usize,
}

impl ModuleImage {
    pub fn new(image: Image16, rows: usize, cols: usize) -> Result<Self, RectifyError> {
        if rows == 0 || cols == 0 {
            return Err(RectifyError::Geometry { rows, cols, cell_px: 0 });
        }
        let aspect = image.width() as f64 / image.height() as f64;
        let expected = cols as f64 / rows as f64;
        if ((aspect - expected) / expected).abs() > 0.01 {
            return Err(RectifyError::Geometry {
                rows,
                cols,
                cell_px: image.width() / cols,
            });
        }
        Ok(Self { image, rows, cols })
    }
}

/// Crop, estimate corners, map onto the canonical rectangle and resample.
///
/// When the module's long side lies horizontally in the image but the geometry
/// has more rows than columns (or vice versa), the corner assignment is rotated
/// by 90 degrees so that the output always follows the configured orientation.
pub fn rectify_module(
    img: &Image16,
    bbox: &BoundingBox,
    geometry: &ModuleGeometry,
) -> Result<ModuleImage, RectifyError> {
    if bbox.x1 > img.width() || bbox.y1 > img.height() {
        return Err(RectifyError::BoxOutside(*bbox, img.width(), img.height()));
    }
    let crop = img.crop(bbox.x0, bbox.y0, bbox.x1, bbox.y1)?;
    let quad = estimate_corners(&crop)?;
    let (out_w, out_h) = geometry.output_size();

    let (horizontal, vertical) = quad.mean_edge_lengths();
    let src_landscape = horizontal > vertical;
    let dst_landscape = geometry.cols > geometry.rows;
    let c = *quad.corners();
    let src = if geometry.cols != geometry.rows && src_landscape != dst_landscape {
        Quad::new([c[3], c[0], c[1], c[2]])?
    } else {
        quad
    };
    let dst = Quad::rect((out_w - 1) as f64, (out_h - 1) as f64)?;
    let h = homography_dlt(&src, &dst)?;
    let image = warp(&crop, &h, out_w, out_h)?;
    ModuleImage::new(image, geometry.rows, geometry.cols)
}
