//! Module detection in multi-module measurements.
//!
//! The pipeline downscales the measurement, binarizes it with Otsu's threshold,
//! labels 8-connected foreground blobs, proposes one bounding box per blob and
//! finally rejects implausible regions:
//!
//! 1. boxes touching the border of the (downscaled) measurement,
//! 2. boxes whose area is below `min_area_ratio` times the largest surviving box.
//!
//! Surviving boxes are mapped back to the original resolution, rounding outward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{downscale, Image16, ImageError};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("image is constant; no threshold separates foreground from background")]
    ConstantImage,
    #[error("invalid detection parameters: scale {scale}, min_area_ratio {min_area_ratio}")]
    Params { scale: f64, min_area_ratio: f64 },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Axis-aligned box, `[x0, x1) x [y0, y1)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", try_from = "[usize; 4]")]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    /// Returns `None` for empty boxes.
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Option<Self> {
        (x1 > x0 && y1 > y0).then_some(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BoundingBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn touches_border(&self, width: usize, height: usize) -> bool {
        self.x0 == 0 || self.y0 == 0 || self.x1 >= width || self.y1 >= height
    }
}

impl From<BoundingBox> for [usize; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl TryFrom<[usize; 4]> for BoundingBox {
    type Error = String;

    fn try_from(v: [usize; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3]).ok_or_else(|| format!("empty box {v:?}"))
    }
}

/// The two detector hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    /// Downscaling factor applied before binarization.
    pub scale: f64,
    /// Minimum box area relative to the largest box in the measurement.
    pub min_area_ratio: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            scale: 0.23,
            min_area_ratio: 0.42,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if ok(self.scale) && ok(self.min_area_ratio) {
            Ok(())
        } else {
            Err(DetectError::Params {
                scale: self.scale,
                min_area_ratio: self.min_area_ratio,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    /// Foreground is every pixel strictly above `threshold`.
    pub fn from_threshold(img: &Image16, threshold: u16) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.data().iter().map(|&v| v > threshold).collect(),
        }
    }
}

/// Label grid produced by [`connected_components`]; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

pub(crate) fn histogram(img: &Image16) -> Vec<u64> {
    let mut hist = vec![0u64; 65536];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    hist
}

/// Otsu objective for the split `{<= t}` / `{> t}`, given the class sizes and
/// intensity sums. Proportional to the between-class variance.
#[inline]
pub(crate) fn between_class_score(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    let d = s0 as f64 * n1 as f64 - s1 as f64 * n0 as f64;
    d * d / (n0 as f64 * n1 as f64)
}

/// Otsu threshold over the full 16-bit histogram.
///
/// Foreground is `pixel > T`. When several thresholds reach the maximum score,
/// the mean of the maximizing set, rounded half up, is returned.
pub fn otsu_threshold(img: &Image16) -> Result<u16, DetectError> {
    let hist = histogram(img);
    let total_n: u64 = img.data().len() as u64;
    let total_s: u64 = img.data().iter().map(|&v| v as u64).sum();

    let mut best = f64::NEG_INFINITY;
    let (mut tie_sum, mut tie_count) = (0u64, 0u64);
    let (mut n0, mut s0) = (0u64, 0u64);
    for (t, &count) in hist.iter().enumerate() {
        n0 += count;
        s0 += count * t as u64;
        if n0 == 0 {
            continue;
        }
        let n1 = total_n - n0;
        if n1 == 0 {
            break;
        }
        let score = between_class_score(n0, s0, n1, total_s - s0);
        if score > best {
            best = score;
            tie_sum = t as u64;
            tie_count = 1;
        } else if score == best {
            tie_sum += t as u64;
            tie_count += 1;
        }
    }
    if tie_count == 0 {
        return Err(DetectError::ConstantImage);
    }
    Ok(((2 * tie_sum + tie_count) / (2 * tie_count)) as u16)
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // keep the smaller provisional label as root so raster order survives
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// 8-connected labeling, labels numbered in raster order of each component's first pixel.
pub fn connected_components(mask: &BinaryMask) -> Labels {
    let (w, h) = (mask.width, mask.height);
    let mut provisional = vec![0u32; w * h];
    // parent[0] is a dummy for background
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.data[i] {
                continue;
            }
            let mut current = 0u32;
            let mut neighbours = [0u32; 4];
            if x > 0 {
                neighbours[0] = provisional[i - 1];
            }
            if y > 0 {
                let up = i - w;
                neighbours[1] = provisional[up];
                if x > 0 {
                    neighbours[2] = provisional[up - 1];
                }
                if x + 1 < w {
                    neighbours[3] = provisional[up + 1];
                }
            }
            for &n in neighbours.iter().filter(|&&n| n != 0) {
                if current == 0 {
                    current = n;
                } else {
                    union(&mut parent, current, n);
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            provisional[i] = current;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut labels = provisional;
    for l in labels.iter_mut().filter(|l| **l != 0) {
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            count += 1;
            remap[root] = count;
        }
        *l = remap[root];
    }
    Labels {
        width: w,
        height: h,
        labels,
        count: count as usize,
    }
}

/// Tight bounding box of every labeled component, ordered by label.
pub fn propose_regions(labels: &Labels) -> Vec<BoundingBox> {
    let mut extents = vec![(usize::MAX, usize::MAX, 0usize, 0usize); labels.count];
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.labels[y * labels.width + x];
            if l == 0 {
                continue;
            }
            let e = &mut extents[l as usize - 1];
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x + 1);
            e.3 = e.3.max(y + 1);
        }
    }
    extents
        .into_iter()
        .filter_map(|(x0, y0, x1, y1)| BoundingBox::new(x0, y0, x1, y1))
        .collect()
}

/// Applies the border and relative-area constraints. Order is preserved.
pub fn filter_regions(
    boxes: &[BoundingBox],
    width: usize,
    height: usize,
    params: &DetectionParams,
) -> Vec<BoundingBox> {
    let inner: Vec<BoundingBox> = boxes
        .iter()
        .copied()
        .filter(|b| !b.touches_border(width, height))
        .collect();
    let a_max = inner.iter().map(BoundingBox::area).max().unwrap_or(0);
    let min_area = params.min_area_ratio * a_max as f64;
    inner
        .into_iter()
        .filter(|b| b.area() as f64 >= min_area)
        .collect()
}

/// Maps a box from a `small` frame onto a `full` frame, rounding outward.
fn upscale_box(b: &BoundingBox, small: (usize, usize), full: (usize, usize)) -> BoundingBox {
    let fx = full.0 as f64 / small.0 as f64;
    let fy = full.1 as f64 / small.1 as f64;
    let x0 = (b.x0 as f64 * fx).floor() as usize;
    let y0 = (b.y0 as f64 * fy).floor() as usize;
    let x1 = ((b.x1 as f64 * fx).ceil() as usize).min(full.0);
    let y1 = ((b.y1 as f64 * fy).ceil() as usize).min(full.1);
    BoundingBox { x0, y0, x1, y1 }
}

/// Detects every completely visible module; boxes are in original-resolution pixels.
pub fn detect_modules(
    img: &Image16,
    params: &DetectionParams,
) -> Result<Vec<BoundingBox>, DetectError> {
    params.validate()?;
    let small = downscale(img, params.scale)?;
    let threshold = otsu_threshold(&small)?;
    let mask = BinaryMask::from_threshold(&small, threshold);
    let labels = connected_components(&mask);
    let boxes = propose_regions(&labels);
    let kept = filter_regions(&boxes, small.width(), small.height(), params);
    let mut out: Vec<BoundingBox> = Vec::with_capacity(kept.len());
    for b in &kept {
        let up = upscale_box(
            b,
            (small.width(), small.height()),
            (img.width(), img.height()),
        );
        if !out.contains(&up) {
            out.push(up);
        }
    }
    Ok(out)
}
