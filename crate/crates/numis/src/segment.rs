//! Two-sided coin photograph segmentation.
//!
//! Auction photographs show the obverse and reverse side by side on a plain
//! background. The segmenter estimates the background colour from the image
//! corners, locates the bottom-rightmost object (assumed to be the reverse),
//! validates it, confirms exactly one further object (the obverse) sits to
//! its left, and emits a greyscale crop of the reverse box. Images violating
//! any rule are rejected with a specific cause.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use image::{GrayImage, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("image {0}x{1} too small for corner sampling (needs at least {2}x{2})")]
    TooSmall(u32, u32, u32),
    #[error("invalid segmentation params: {0}")]
    BadParams(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Tunable thresholds. The defaults were chosen on synthetic fixtures; every
/// value here is an explicit guess and can be overridden from the pipeline
/// config.
#[derive(Clone, Debug)]
pub struct SegmentationParams {
    /// Square corner patch side, in pixels.
    pub corner_patch: u32,
    /// Max channel distance between corner means before the background is
    /// declared inconsistent.
    pub corner_agreement_threshold: f32,
    /// Per-pixel channel distance to the background colour still counted as
    /// background.
    pub background_tolerance: f32,
    /// Minimum object width/height; narrower blobs are treated as noise.
    pub min_object_extent: u32,
    /// Max `|w−h| / max(w,h)` for an acceptable reverse box.
    pub squareness_tolerance: f32,
    /// Max background fraction inside an acceptable reverse box.
    pub background_fill_ratio: f32,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            corner_patch: 8,
            corner_agreement_threshold: 12.0,
            background_tolerance: 20.0,
            min_object_extent: 32,
            squareness_tolerance: 0.35,
            background_fill_ratio: 0.45,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.corner_patch == 0 {
            return Err(SegmentError::BadParams("corner_patch must be positive".into()));
        }
        if self.corner_agreement_threshold < 0.0 || self.background_tolerance < 0.0 {
            return Err(SegmentError::BadParams("tolerances must be nonnegative".into()));
        }
        if !(self.squareness_tolerance > 0.0 && self.squareness_tolerance < 1.0) {
            return Err(SegmentError::BadParams("squareness_tolerance must be in (0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.background_fill_ratio) {
            return Err(SegmentError::BadParams("background_fill_ratio must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn right(&self) -> u32 {
        self.x + self.w - 1
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectCause {
    InconsistentBackground,
    NoObject,
    TouchesEdge,
    ObjectAbove,
    NoObverse,
    ExtraObjects,
}

impl fmt::Display for RejectCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectCause::InconsistentBackground => "inconsistent-background",
            RejectCause::NoObject => "no-object",
            RejectCause::TouchesEdge => "touches-edge",
            RejectCause::ObjectAbove => "object-above",
            RejectCause::NoObverse => "no-obverse",
            RejectCause::ExtraObjects => "extra-objects",
        };
        f.write_str(s)
    }
}

pub enum SegmentationOutcome {
    Accepted { reverse_box: Rect, obverse_box: Rect, crop: GrayImage },
    Rejected(RejectCause),
}

fn patch_mean(img: &RgbImage, x0: u32, y0: u32, side: u32) -> [f32; 3] {
    let mut sum = [0.0f64; 3];
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let p = img.get_pixel(x, y);
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
        }
    }
    let n = (side * side) as f64;
    [0, 1, 2].map(|c| (sum[c] / n) as f32)
}

fn channel_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f32::max)
}

/// Mean of the four corner-patch means, or `None` when the corners disagree
/// by more than the agreement threshold (inconsistent background).
pub fn estimate_background(
    img: &RgbImage,
    params: &SegmentationParams,
) -> Result<Option<[f32; 3]>, SegmentError> {
    let s = params.corner_patch;
    let (w, h) = img.dimensions();
    if w < 2 * s || h < 2 * s {
        return Err(SegmentError::TooSmall(w, h, 2 * s));
    }
    let corners = [
        patch_mean(img, 0, 0, s),
        patch_mean(img, w - s, 0, s),
        patch_mean(img, 0, h - s, s),
        patch_mean(img, w - s, h - s, s),
    ];
    for i in 0..4 {
        for j in i + 1..4 {
            if channel_dist(corners[i], corners[j]) > params.corner_agreement_threshold {
                return Ok(None);
            }
        }
    }
    let mut bg = [0.0f32; 3];
    for c in &corners {
        for k in 0..3 {
            bg[k] += c[k] / 4.0;
        }
    }
    Ok(Some(bg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FindFailure {
    NoObject,
    TouchesEdge,
}

fn is_bg(img: &RgbImage, x: u32, y: u32, bg: [f32; 3], tol: f32) -> bool {
    let p = img.get_pixel(x, y);
    channel_dist([p[0] as f32, p[1] as f32, p[2] as f32], bg) <= tol
}

/// Non-background pixel count in one column, restricted to a row range.
fn col_hits(img: &RgbImage, x: u32, y0: u32, y1: u32, bg: [f32; 3], tol: f32) -> u32 {
    (y0..=y1).filter(|&y| !is_bg(img, x, y, bg, tol)).count() as u32
}

fn row_hits(img: &RgbImage, y: u32, x0: u32, x1: u32, bg: [f32; 3], tol: f32) -> u32 {
    (x0..=x1).filter(|&x| !is_bg(img, x, y, bg, tol)).count() as u32
}

/// Scans leftward from `right_limit` for the bounding box of the rightmost
/// object. A column (or row) belongs to an object when it has at least two
/// non-background pixels; blobs narrower or shorter than `min_object_extent`
/// are skipped as noise. Objects touching any image border fail with
/// `TouchesEdge` (the coin may have been cropped by the photographer).
pub fn find_object_box(
    img: &RgbImage,
    bg: [f32; 3],
    params: &SegmentationParams,
    right_limit: u32,
) -> Result<Rect, FindFailure> {
    let (w, h) = img.dimensions();
    assert!(right_limit < w, "right_limit outside image");
    let tol = params.background_tolerance;
    let mut limit = right_limit as i64;
    loop {
        // rightmost object column at or left of the limit
        let mut right = None;
        let mut x = limit;
        while x >= 0 {
            if col_hits(img, x as u32, 0, h - 1, bg, tol) >= 2 {
                right = Some(x as u32);
                break;
            }
            x -= 1;
        }
        let right = right.ok_or(FindFailure::NoObject)?;
        if right == w - 1 {
            return Err(FindFailure::TouchesEdge);
        }
        // continue left to the next background-only column
        let mut left = None;
        let mut x = right as i64 - 1;
        while x >= 0 {
            if col_hits(img, x as u32, 0, h - 1, bg, tol) < 2 {
                left = Some((x + 1) as u32);
                break;
            }
            x -= 1;
        }
        let left = match left {
            Some(l) => l,
            None => return Err(FindFailure::TouchesEdge), // reaches column 0
        };
        if right - left + 1 < params.min_object_extent {
            // noise blob: resume the search past it
            limit = left as i64 - 1;
            continue;
        }

        // same scan vertically, from the bottom, within the found columns
        let mut bottom = None;
        let mut y = h as i64 - 1;
        while y >= 0 {
            if row_hits(img, y as u32, left, right, bg, tol) >= 2 {
                bottom = Some(y as u32);
                break;
            }
            y -= 1;
        }
        let bottom = bottom.ok_or(FindFailure::NoObject)?;
        if bottom == h - 1 {
            return Err(FindFailure::TouchesEdge);
        }
        let mut top = None;
        let mut y = bottom as i64 - 1;
        while y >= 0 {
            if row_hits(img, y as u32, left, right, bg, tol) < 2 {
                top = Some((y + 1) as u32);
                break;
            }
            y -= 1;
        }
        let top = match top {
            Some(t) => t,
            None => return Err(FindFailure::TouchesEdge),
        };
        if bottom - top + 1 < params.min_object_extent {
            limit = left as i64 - 1;
            continue;
        }
        return Ok(Rect { x: left, y: top, w: right - left + 1, h: bottom - top + 1 });
    }
}

fn squareness(b: &Rect) -> f32 {
    let (w, h) = (b.w as f32, b.h as f32);
    (w - h).abs() / w.max(h)
}

fn background_fraction(img: &RgbImage, b: &Rect, bg: [f32; 3], tol: f32) -> f32 {
    let mut n_bg = 0u64;
    for y in b.y..=b.bottom() {
        for x in b.x..=b.right() {
            if is_bg(img, x, y, bg, tol) {
                n_bg += 1;
            }
        }
    }
    n_bg as f32 / (b.w as u64 * b.h as u64) as f32
}

/// Greyscale conversion with luma weights 0.299/0.587/0.114.
pub fn to_greyscale(img: &RgbImage) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let l = 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32;
        image::Luma([l.round().clamp(0.0, 255.0) as u8])
    })
}

fn crop_grey(img: &RgbImage, b: &Rect) -> GrayImage {
    let grey = to_greyscale(img);
    GrayImage::from_fn(b.w, b.h, |x, y| *grey.get_pixel(b.x + x, b.y + y))
}

/// Full per-image rule chain; see the module docs for the order of checks.
pub fn segment(
    img: &RgbImage,
    params: &SegmentationParams,
) -> Result<SegmentationOutcome, SegmentError> {
    params.validate()?;
    use RejectCause::*;
    use SegmentationOutcome::Rejected;
    let bg = match estimate_background(img, params)? {
        Some(bg) => bg,
        None => return Ok(Rejected(InconsistentBackground)),
    };
    let tol = params.background_tolerance;
    let (w, _) = img.dimensions();

    // reverse box: rightmost object passing squareness and fill checks;
    // failures re-search further left
    let mut limit = w - 1;
    let reverse = loop {
        let b = match find_object_box(img, bg, params, limit) {
            Ok(b) => b,
            Err(FindFailure::NoObject) => return Ok(Rejected(NoObject)),
            Err(FindFailure::TouchesEdge) => return Ok(Rejected(TouchesEdge)),
        };
        if squareness(&b) > params.squareness_tolerance
            || background_fraction(img, &b, bg, tol) > params.background_fill_ratio
        {
            if b.x == 0 {
                return Ok(Rejected(NoObject));
            }
            limit = b.x - 1;
            continue;
        }
        break b;
    };

    // anything above the reverse box means stacked objects
    for y in 0..reverse.y {
        if row_hits(img, y, reverse.x, reverse.right(), bg, tol) >= 2 {
            return Ok(Rejected(ObjectAbove));
        }
    }

    // exactly one object (the obverse) must sit to the left
    if reverse.x == 0 {
        return Ok(Rejected(NoObverse));
    }
    let obverse = match find_object_box(img, bg, params, reverse.x - 1) {
        Ok(b) => b,
        Err(FindFailure::NoObject) => return Ok(Rejected(NoObverse)),
        Err(FindFailure::TouchesEdge) => return Ok(Rejected(TouchesEdge)),
    };
    if obverse.x > 0
        && !matches!(
            find_object_box(img, bg, params, obverse.x - 1),
            Err(FindFailure::NoObject)
        )
    {
        return Ok(Rejected(ExtraObjects));
    }

    let crop = crop_grey(img, &reverse);
    Ok(SegmentationOutcome::Accepted { reverse_box: reverse, obverse_box: obverse, crop })
}

/// Outcome tally for one corpus run. Per-image lists are sorted by stem.
#[derive(Debug, Default)]
pub struct CorpusReport {
    pub accepted: Vec<String>,
    pub rejected: Vec<(String, RejectCause)>,
    pub unreadable: Vec<String>,
}

impl CorpusReport {
    pub fn total(&self) -> usize {
        self.accepted.len() + self.rejected.len() + self.unreadable.len()
    }

    pub fn rejection_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.rejected.len() as f64 / self.total() as f64
        }
    }

    pub fn cause_counts(&self) -> BTreeMap<RejectCause, usize> {
        let mut m = BTreeMap::new();
        for (_, cause) in &self.rejected {
            *m.entry(*cause).or_insert(0) += 1;
        }
        m
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("segmentation report\n");
        s.push_str(&format!("images processed: {}\n", self.total()));
        s.push_str(&format!("accepted: {}\n", self.accepted.len()));
        s.push_str(&format!(
            "rejected: {} ({:.1}%)\n",
            self.rejected.len(),
            100.0 * self.rejection_rate()
        ));
        for (cause, n) in self.cause_counts() {
            s.push_str(&format!("  {}: {}\n", cause, n));
        }
        s.push_str(&format!("unreadable: {}\n", self.unreadable.len()));
        s
    }
}

/// Segments every PNG/JPEG under `input_dir` (sorted by file stem), writing
/// accepted crops as `<stem>-rev.png` under `output_dir`. Unreadable files
/// are counted, never fatal.
pub fn process_corpus(
    input_dir: &Path,
    output_dir: &Path,
    params: &SegmentationParams,
) -> Result<CorpusReport, SegmentError> {
    params.validate()?;
    std::fs::create_dir_all(output_dir)?;
    let mut files: Vec<_> = std::fs::read_dir(input_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
            )
        })
        .collect();
    files.sort();
    let mut report = CorpusReport::default();
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        let img = match image::open(&path) {
            Ok(i) => i.to_rgb8(),
            Err(_) => {
                report.unreadable.push(stem);
                continue;
            }
        };
        match segment(&img, params)? {
            SegmentationOutcome::Accepted { crop, .. } => {
                crop.save(output_dir.join(format!("{}-rev.png", stem)))?;
                report.accepted.push(stem);
            }
            SegmentationOutcome::Rejected(cause) => report.rejected.push((stem, cause)),
        }
    }
    Ok(report)
}
