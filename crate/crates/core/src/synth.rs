//! Deterministic synthetic EL data: single rectified modules with a known
//! inactive area, and multi-module scenes with ground-truth boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::BoundingBox;
use crate::imagecore::{quantize, Image16};
use crate::rectify::{homography_dlt, Homography, Point, Quad, RectifyError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible layout: {0}")]
    Layout(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Rectify(#[from] RectifyError),
}

/// Appearance of a synthetic module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleStyle {
    pub rows: usize,
    pub cols: usize,
    /// Pixels per cell edge in the canonical raster.
    pub cell_px: usize,
    /// Width of the dark line between neighbouring cells; 0 disables it.
    pub gap_px: usize,
    pub active_level: u16,
    pub dark_level: u16,
    /// Relative spread of per-cell brightness.
    pub cell_variation: f64,
}

impl Default for ModuleStyle {
    fn default() -> Self {
        Self {
            rows: 10,
            cols: 6,
            cell_px: 40,
            gap_px: 1,
            active_level: 3000,
            dark_level: 300,
            cell_variation: 0.05,
        }
    }
}

impl ModuleStyle {
    pub fn size(&self) -> (usize, usize) {
        (self.cols * self.cell_px, self.rows * self.cell_px)
    }

    /// Pixel span `[lo, hi)` of cell `index` along an axis with `n` cells, gaps excluded.
    fn cell_span(&self, index: usize, n: usize) -> (usize, usize) {
        let (g_lo, g_hi) = (self.gap_px / 2, self.gap_px - self.gap_px / 2);
        let lo = index * self.cell_px + if index > 0 { g_lo } else { 0 };
        let hi = (index + 1) * self.cell_px - if index + 1 < n { g_hi } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Canonical-raster module pattern: per-pixel classes before noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulePattern {
    pub style: ModuleStyle,
    pub width: usize,
    pub height: usize,
    /// Mean intensity per pixel (without noise).
    pub levels: Vec<u16>,
    /// True where a defect darkened an otherwise active cell pixel.
    pub defect: Vec<bool>,
}

impl ModulePattern {
    /// Fraction of all module pixels covered by defects.
    pub fn defect_fraction(&self) -> f64 {
        self.defect.iter().filter(|&&d| d).count() as f64 / self.defect.len() as f64
    }

    /// Fraction of pixels in the gaps between cells.
    pub fn gap_fraction(&self) -> f64 {
        let dark = self
            .levels
            .iter()
            .zip(&self.defect)
            .filter(|(&l, &d)| l == self.style.dark_level && !d)
            .count();
        dark as f64 / self.levels.len() as f64
    }

    /// Level at normalized coordinates in `[0,1)^2`, nearest sample.
    fn sample_unit(&self, u: f64, v: f64) -> Option<u16> {
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return None;
        }
        let x = ((u * self.width as f64) as usize).min(self.width - 1);
        let y = ((v * self.height as f64) as usize).min(self.height - 1);
        Some(self.levels[y * self.width + x])
    }
}

/// Builds a module pattern in which exactly `round(defect_fraction * W * H)`
/// cell pixels are dark. Defects grow from a random side of randomly chosen
/// cells, mimicking disconnected cell parts.
pub fn module_pattern(style: &ModuleStyle, defect_fraction: f64, rng: &mut impl Rng) -> Result<ModulePattern, SynthError> {
    if style.rows == 0 || style.cols == 0 || style.cell_px == 0 || style.gap_px >= style.cell_px {
        return Err(SynthError::Param(format!("bad module style {style:?}")));
    }
    let (w, h) = style.size();
    let mut levels = vec![style.dark_level; w * h];
    let mut defect = vec![false; w * h];
    let mut cells = Vec::with_capacity(style.rows * style.cols);
    for r in 0..style.rows {
        for c in 0..style.cols {
            let (x0, x1) = style.cell_span(c, style.cols);
            let (y0, y1) = style.cell_span(r, style.rows);
            let jitter = 1.0 + style.cell_variation * (2.0 * rng.random::<f64>() - 1.0);
            let level = quantize(style.active_level as f64 * jitter);
            for y in y0..y1 {
                for x in x0..x1 {
                    levels[y * w + x] = level;
                }
            }
            cells.push((x0, y0, x1, y1));
        }
    }
    let capacity: usize = cells.iter().map(|c| (c.2 - c.0) * (c.3 - c.1)).sum();
    if !(0.0..=1.0).contains(&defect_fraction) {
        return Err(SynthError::Param(format!("defect fraction {defect_fraction}")));
    }
    let mut remaining = (defect_fraction * (w * h) as f64).round() as usize;
    if remaining > capacity {
        return Err(SynthError::Param(format!(
            "defect fraction {defect_fraction} exceeds active area"
        )));
    }
    // random cell order (Fisher-Yates)
    for i in (1..cells.len()).rev() {
        let j = rng.random_range(0..=i);
        cells.swap(i, j);
    }
    for &(x0, y0, x1, y1) in &cells {
        if remaining == 0 {
            break;
        }
        let flip_x = rng.random::<bool>();
        let flip_y = rng.random::<bool>();
        let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for dy in 0..(y1 - y0) {
            for dx in 0..(x1 - x0) {
                let x = if flip_x { x1 - 1 - dx } else { x0 + dx };
                let y = if flip_y { y1 - 1 - dy } else { y0 + dy };
                pixels.push(y * w + x);
            }
        }
        for &i in pixels.iter().take(remaining) {
            levels[i] = style.dark_level;
            defect[i] = true;
        }
        remaining -= remaining.min(pixels.len());
    }
    Ok(ModulePattern {
        style: *style,
        width: w,
        height: h,
        levels,
        defect,
    })
}

fn add_noise(levels: &[u16], sigma: f64, rng: &mut impl Rng) -> Vec<u16> {
    if sigma <= 0.0 {
        return levels.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    levels
        .iter()
        .map(|&l| quantize(l as f64 + normal.sample(rng)))
        .collect()
}

/// A rectified synthetic module and its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticModule {
    pub image: Image16,
    pub defect_fraction: f64,
    pub gap_fraction: f64,
}

pub fn synth_module(
    style: &ModuleStyle,
    defect_fraction: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticModule, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = module_pattern(style, defect_fraction, &mut rng)?;
    let data = add_noise(&pattern.levels, noise_sigma, &mut rng);
    Ok(SyntheticModule {
        image: Image16::new(pattern.width, pattern.height, data).expect("consistent dims"),
        defect_fraction: pattern.defect_fraction(),
        gap_fraction: pattern.gap_fraction(),
    })
}

/// One module placed in a scene; `corners` are the image-space positions of
/// the module's outer corners (TL, TR, BR, BL).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModule {
    pub corners: [Point; 4],
    #[serde(default)]
    pub defect_fraction: f64,
}

impl SceneModule {
    pub fn axis_aligned(x: f64, y: f64, w: f64, h: f64, defect_fraction: f64) -> Self {
        Self {
            corners: [(x, y), (x + w, y), (x + w, y + h), (x, y + h)],
            defect_fraction,
        }
    }

    fn extent(&self) -> (f64, f64, f64, f64) {
        let xs = self.corners.iter().map(|p| p.0);
        let ys = self.corners.iter().map(|p| p.1);
        (
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: u16,
    pub noise_sigma: f64,
    pub style: ModuleStyle,
    pub modules: Vec<SceneModule>,
    pub seed: u64,
}

/// Renders a scene. Returns the image and the boxes of every module lying
/// completely inside the canvas without touching its border.
pub fn synth_scene(spec: &SceneSpec) -> Result<(Image16, Vec<BoundingBox>), SynthError> {
    if spec.width == 0 || spec.height == 0 {
        return Err(SynthError::Layout("empty canvas".into()));
    }
    let extents: Vec<_> = spec.modules.iter().map(SceneModule::extent).collect();
    for (i, a) in extents.iter().enumerate() {
        for b in &extents[i + 1..] {
            if a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3 {
                return Err(SynthError::Layout("modules overlap".into()));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let mut levels = vec![spec.background; w * h];
    let mut truth = Vec::new();
    for (m, ext) in spec.modules.iter().zip(&extents) {
        let pattern = module_pattern(&spec.style, m.defect_fraction, &mut rng)?;
        let quad = Quad::new(m.corners)?;
        let to_unit: Homography = homography_dlt(&quad, &Quad::rect(1.0, 1.0)?)?;
        let x_lo = ext.0.floor().max(0.0) as usize;
        let y_lo = ext.1.floor().max(0.0) as usize;
        let x_hi = (ext.2.ceil().max(0.0) as usize).min(w);
        let y_hi = (ext.3.ceil().max(0.0) as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (u, v) = to_unit.apply((x as f64 + 0.5, y as f64 + 0.5));
                if let Some(level) = pattern.sample_unit(u, v) {
                    levels[y * w + x] = level;
                }
            }
        }
        if ext.0 > 0.0 && ext.1 > 0.0 && ext.2 < w as f64 && ext.3 < h as f64 {
            let b = BoundingBox::new(
                ext.0.floor() as usize,
                ext.1.floor() as usize,
                ext.2.ceil() as usize,
                ext.3.ceil() as usize,
            );
            if let Some(b) = b.filter(|b| !b.touches_border(w, h)) {
                truth.push(b);
            }
        }
    }
    let data = add_noise(&levels, spec.noise_sigma, &mut rng);
    Ok((Image16::new(w, h, data).expect("consistent dims"), truth))
}

/// Places `count` equally sized portrait modules on a near-square grid with
/// `margin` pixels to the canvas border and `spacing` between modules.
pub fn grid_layout(
    count: usize,
    width: usize,
    height: usize,
    margin: f64,
    spacing: f64,
    aspect: f64,
) -> Result<Vec<SceneModule>, SynthError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let cell_w = (width as f64 - 2.0 * margin - spacing * (cols - 1) as f64) / cols as f64;
    let cell_h = (height as f64 - 2.0 * margin - spacing * (rows - 1) as f64) / rows as f64;
    if cell_w < 4.0 || cell_h < 4.0 {
        return Err(SynthError::Layout(format!("{count} modules do not fit")));
    }
    // largest module of the requested height/width aspect fitting a grid slot
    let (mw, mh) = if cell_h / cell_w > aspect {
        (cell_w, cell_w * aspect)
    } else {
        (cell_h / aspect, cell_h)
    };
    Ok((0..count)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let x = margin + c as f64 * (cell_w + spacing) + 0.5 * (cell_w - mw);
            let y = margin + r as f64 * (cell_h + spacing) + 0.5 * (cell_h - mh);
            SceneModule::axis_aligned(x.round(), y.round(), mw.floor(), mh.floor(), 0.0)
        })
        .collect())
}

/// Scene corpus in the style of on-site measurements: `min..=max` visible
/// modules per scene on a grid, slight jitter, and an optional module cut by
/// the canvas edge.
pub fn scene_corpus(
    scenes: usize,
    size: usize,
    modules: (usize, usize),
    style: &ModuleStyle,
    seed: u64,
) -> Result<Vec<(Image16, Vec<BoundingBox>)>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aspect = style.rows as f64 / style.cols as f64;
    (0..scenes)
        .map(|k| {
            let count = rng.random_range(modules.0..=modules.1);
            let margin = size as f64 * rng.random_range(0.06..0.1);
            let spacing = size as f64 * rng.random_range(0.03..0.06);
            let mut layout = grid_layout(count, size, size, margin, spacing, aspect)?;
            for m in &mut layout {
                let dx = rng.random_range(-0.01..0.01) * size as f64;
                let dy = rng.random_range(-0.01..0.01) * size as f64;
                for c in &mut m.corners {
                    c.0 += dx.round();
                    c.1 += dy.round();
                }
                m.defect_fraction = rng.random_range(0.0..0.15);
            }
            if rng.random::<bool>() {
                // a partially visible module hanging over the right edge
                let h = size as f64 * 0.3;
                layout.push(SceneModule::axis_aligned(
                    size as f64 - 0.5 * margin,
                    margin,
                    h / aspect,
                    h,
                    0.0,
                ));
            }
            let spec = SceneSpec {
                width: size,
                height: size,
                background: rng.random_range(100..400),
                noise_sigma: rng.random_range(20.0..80.0),
                style: *style,
                modules: layout,
                seed: seed.wrapping_mul(31).wrapping_add(k as u64),
            };
            synth_scene(&spec)
        })
        .collect()
}
