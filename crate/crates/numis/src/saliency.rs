//! Hierarchical-perturbation saliency (black box).
//!
//! The model is only ever queried through a score function. Rectangular
//! regions are blanked with their mean grey value; the score drop under each
//! perturbation is the region's attribution. Coarse regions whose
//! attribution is high get refined into half-size children, level by level.
//! Mask results are folded into the per-pixel map as they are produced, so
//! at most one level's masks are ever retained.

use image::{GrayImage, Luma, Rgb, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("invalid saliency config: {0}")]
    BadConfig(String),
    #[error("mask {x},{y} {w}x{h} empty or outside the {iw}x{ih} image")]
    EmptyMask { x: u32, y: u32, w: u32, h: u32, iw: u32, ih: u32 },
    #[error("model returned a non-finite score")]
    NonFiniteScore,
    #[error("map {0}x{1} does not match image {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Clone, Debug)]
pub struct HipeConfig {
    /// Refinement levels including the coarse pass.
    pub max_depth: usize,
    /// Coarse masks per image side.
    pub initial_grid: usize,
    /// Fractional overlap between neighbouring coarse masks.
    pub overlap: f32,
    /// Quantile of a level's positive attributions expanded to the next level.
    pub refinement_threshold: f64,
}

impl Default for HipeConfig {
    fn default() -> Self {
        HipeConfig { max_depth: 4, initial_grid: 4, overlap: 0.5, refinement_threshold: 0.5 }
    }
}

impl HipeConfig {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        if self.max_depth < 1 {
            return Err(SaliencyError::BadConfig("max_depth must be >= 1".into()));
        }
        if self.initial_grid < 2 {
            return Err(SaliencyError::BadConfig("initial_grid must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(SaliencyError::BadConfig("overlap must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.refinement_threshold) {
            return Err(SaliencyError::BadConfig("refinement_threshold must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Upper bound on model evaluations: every mask of every level plus one
    /// clean scoring pass.
    pub fn call_bound(&self) -> usize {
        let g2 = self.initial_grid * self.initial_grid;
        let mut masks = 0usize;
        let mut level = 1usize;
        for _ in 0..self.max_depth {
            masks += level;
            level *= 4;
        }
        g2 * masks + 1
    }
}

/// Per-pixel attribution in [0,1], same extent as the scored image.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    /// An all-zero map of the given extent.
    pub fn zeros(width: u32, height: u32) -> SaliencyMap {
        SaliencyMap { width, height, values: vec![0.0; (width * height) as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[(y * self.width + x) as usize]
    }

    /// Lifts every pixel under `r` to at least `v`.
    pub fn raise(&mut self, r: &Region, v: f32) {
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let i = (y * self.width + x) as usize;
                if self.values[i] < v {
                    self.values[i] = v;
                }
            }
        }
    }

    /// Rescales values to span [0,1]; a constant map is left untouched.
    pub fn normalize(&mut self) {
        let max = self.values.iter().cloned().fold(0.0f32, f32::max);
        let min = self.values.iter().cloned().fold(f32::INFINITY, f32::min);
        if max > min {
            for v in &mut self.values {
                *v = (*v - min) / (max - min);
            }
        }
    }

    /// Plain-text float grid: `width height` on the first line, then one row
    /// of values per line.
    pub fn to_text_grid(&self) -> String {
        let mut s = format!("{} {}\n", self.width, self.height);
        for y in 0..self.height {
            let row: Vec<String> =
                (0..self.width).map(|x| format!("{:.6}", self.get(x, y))).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Replaces the masked region with its mean grey value.
pub fn perturb(image: &GrayImage, mask: &Region) -> Result<GrayImage, SaliencyError> {
    let (iw, ih) = image.dimensions();
    if mask.w == 0 || mask.h == 0 || mask.x + mask.w > iw || mask.y + mask.h > ih {
        return Err(SaliencyError::EmptyMask {
            x: mask.x,
            y: mask.y,
            w: mask.w,
            h: mask.h,
            iw,
            ih,
        });
    }
    let mut sum = 0u64;
    for y in mask.y..mask.y + mask.h {
        for x in mask.x..mask.x + mask.w {
            sum += image.get_pixel(x, y)[0] as u64;
        }
    }
    let mean = (sum as f64 / (mask.w as u64 * mask.h as u64) as f64).round() as u8;
    let mut out = image.clone();
    for y in mask.y..mask.y + mask.h {
        for x in mask.x..mask.x + mask.w {
            out.put_pixel(x, y, Luma([mean]));
        }
    }
    Ok(out)
}

/// Evaluation counters for the invariants tests and stage summaries.
#[derive(Clone, Copy, Debug, Default)]
pub struct HipeStats {
    pub model_calls: usize,
    /// Largest number of (mask, attribution) pairs alive at once.
    pub peak_level_masks: usize,
}

/// The level-0 mask grid for an image: `grid` masks per side with the given
/// fractional overlap. Exposed so callers can reason about coverage.
pub fn coarse_masks(width: u32, height: u32, grid: usize, overlap: f32) -> Vec<Region> {
    // g masks per side of size s with fractional overlap o cover the image
    // when (g−1)·s·(1−o) + s = extent
    let g = grid as f32;
    let masks_span = |extent: u32| {
        let s = extent as f32 / ((g - 1.0) * (1.0 - overlap) + 1.0);
        let stride = s * (1.0 - overlap);
        (s, stride)
    };
    let (sw, dx) = masks_span(width);
    let (sh, dy) = masks_span(height);
    let mut out = Vec::with_capacity(grid * grid);
    for j in 0..grid {
        for i in 0..grid {
            let x0 = (i as f32 * dx).round() as u32;
            let y0 = (j as f32 * dy).round() as u32;
            let w = (sw.round() as u32).min(width - x0).max(1);
            let h = (sh.round() as u32).min(height - y0).max(1);
            out.push(Region { x: x0, y: y0, w, h });
        }
    }
    out
}

fn children(r: &Region) -> Vec<Region> {
    let (w1, h1) = (r.w / 2, r.h / 2);
    let (w2, h2) = (r.w - w1, r.h - h1);
    let mut out = Vec::with_capacity(4);
    for (x, y, w, h) in [
        (r.x, r.y, w1, h1),
        (r.x + w1, r.y, w2, h1),
        (r.x, r.y + h1, w1, h2),
        (r.x + w1, r.y + h1, w2, h2),
    ] {
        if w > 0 && h > 0 {
            out.push(Region { x, y, w, h });
        }
    }
    out
}

/// Positive-attribution quantile used as the refinement cut for one level.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

pub fn attribute<F>(
    score: F,
    image: &GrayImage,
    config: &HipeConfig,
) -> Result<SaliencyMap, SaliencyError>
where
    F: FnMut(&GrayImage) -> f32,
{
    attribute_with_stats(score, image, config).map(|(m, _)| m)
}

/// Hierarchical perturbation; see the module docs. The score function is
/// treated as pure; one clean score is cached for all comparisons.
pub fn attribute_with_stats<F>(
    mut score: F,
    image: &GrayImage,
    config: &HipeConfig,
) -> Result<(SaliencyMap, HipeStats), SaliencyError>
where
    F: FnMut(&GrayImage) -> f32,
{
    config.validate()?;
    let (w, h) = image.dimensions();
    let mut stats = HipeStats::default();
    let mut call = |img: &GrayImage, stats: &mut HipeStats| -> Result<f32, SaliencyError> {
        stats.model_calls += 1;
        let s = score(img);
        if !s.is_finite() {
            return Err(SaliencyError::NonFiniteScore);
        }
        Ok(s)
    };
    let clean = call(image, &mut stats)?;
    let mut map = SaliencyMap::zeros(w, h);

    let mut level = coarse_masks(w, h, config.initial_grid, config.overlap);
    for depth in 0..config.max_depth {
        // evaluate this level, folding into the map as results arrive and
        // retaining only the (region, attribution) pairs needed for refinement
        let mut scored: Vec<(Region, f64)> = Vec::with_capacity(level.len());
        for region in level.drain(..) {
            let s = call(&perturb(image, &region)?, &mut stats)?;
            let a = (clean as f64 - s as f64).max(0.0);
            map.raise(&region, a as f32);
            scored.push((region, a));
        }
        stats.peak_level_masks = stats.peak_level_masks.max(scored.len());
        if depth + 1 == config.max_depth {
            break;
        }
        let mut positive: Vec<f64> =
            scored.iter().map(|(_, a)| *a).filter(|&a| a > 0.0).collect();
        if positive.is_empty() {
            break;
        }
        positive.sort_by(f64::total_cmp);
        let cut = quantile(&positive, config.refinement_threshold);
        for (region, a) in scored {
            if a > 0.0 && a >= cut {
                level.extend(children(&region));
            }
        }
        if level.is_empty() {
            break;
        }
    }
    map.normalize();
    Ok((map, stats))
}

fn heat(v: f32) -> Rgb<u8> {
    // dark red through orange to yellow, deterministic
    let r = 255.0;
    let g = 180.0 * v;
    let b = 32.0 * (1.0 - v);
    Rgb([r as u8, g.round() as u8, b.round() as u8])
}

/// Alpha-blends a heat colormap over the greyscale image; attribution 0
/// leaves pixels untouched.
pub fn render(map: &SaliencyMap, image: &GrayImage) -> Result<RgbImage, SaliencyError> {
    let (w, h) = image.dimensions();
    if map.width != w || map.height != h {
        return Err(SaliencyError::ShapeMismatch(map.width, map.height, w, h));
    }
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let grey = image.get_pixel(x, y)[0] as f32;
            let v = map.get(x, y);
            let p = if v == 0.0 {
                Rgb([grey as u8; 3])
            } else {
                let c = heat(v);
                let alpha = 0.55 * v;
                let mix = |ch: u8| (grey * (1.0 - alpha) + ch as f32 * alpha).round() as u8;
                Rgb([mix(c[0]), mix(c[1]), mix(c[2])])
            };
            out.put_pixel(x, y, p);
        }
    }
    Ok(out)
}
