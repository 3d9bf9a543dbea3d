//! Adapt-focused detection refinement.
//!
//! The pipeline has four stages:
//!
//! 1. [`adaptive_resize`] expands every original detection about its centre,
//!    with a larger ratio for narrow (small) individuals.
//! 2. [`dense_region_merge`] grows seed boxes by absorbing overlapping
//!    expanded boxes until each seed is isolated, yielding dense sub-regions.
//! 3. [`refine_regions`] crops each sub-region and re-runs a detector on it
//!    through a [`DetectorAdapter`].
//! 4. [`fuse_detections`] merges the original and fine-grained detections
//!    with class-agnostic non-maximum suppression.
//!
//! [`run_focuser`] composes the four stages for one frame.

mod adapters;

pub use adapters::{CommandDetector, FileDetector, FileDetectorRecord};

use std::cmp::Ordering;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{clip_box, iou, overlaps, union_box, BBox, FrameSpec, GeometryError};

#[derive(Debug, Error)]
pub enum FocuserError {
    #[error("invalid focuser configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("detection {index} has no score; fusion requires scored boxes")]
    MissingScore { index: usize },
    #[error("detector failed on region {region_index} ({bounds:?}) of frame {frame_id}: {source}")]
    Region {
        frame_id: String,
        region_index: usize,
        bounds: BBox,
        #[source]
        source: Box<AdapterError>,
    },
}

impl From<image::ImageError> for AdapterError {
    fn from(e: image::ImageError) -> Self {
        Self::Image(Box::new(e))
    }
}

/// Errors raised by a [`DetectorAdapter`].
#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("frame {0} has no image, but the detector needs pixels")]
    MissingImage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("could not encode crop: {0}")]
    Image(Box<image::ImageError>),
    #[error("detector command `{command}` exited with {status}: {stderr}")]
    CommandFailed {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("malformed detector output: {0}")]
    Malformed(String),
    #[error("detector returned a box outside the region: {0:?}")]
    OutOfRegion(BBox),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocuserConfig {
    /// Width threshold separating large from small individuals, in pixels.
    pub theta: f64,
    /// Expansion ratio for boxes at least `theta` wide.
    pub beta1: f64,
    /// Expansion ratio for narrower boxes.
    pub beta2: f64,
    pub nms_iou: f64,
    /// Regions that merged fewer boxes than this are not re-detected.
    pub min_merge_count: usize,
    /// Regions narrower or shorter than this are not re-detected.
    pub min_region_size: f64,
}

impl Default for FocuserConfig {
    fn default() -> Self {
        Self {
            theta: 48.0,
            beta1: 1.5,
            beta2: 1.8,
            nms_iou: 0.5,
            min_merge_count: 1,
            min_region_size: 8.0,
        }
    }
}

impl FocuserConfig {
    pub fn validate(&self) -> Result<(), FocuserError> {
        let bad = |m: &str| Err(FocuserError::Config(m.to_string()));
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return bad("theta must be > 0");
        }
        if !(self.beta1.is_finite() && self.beta1 >= 1.0) {
            return bad("beta1 must be >= 1");
        }
        if !(self.beta2.is_finite() && self.beta2 >= 1.0) {
            return bad("beta2 must be >= 1");
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad("nms_iou must lie in (0, 1)");
        }
        if self.min_merge_count < 1 {
            return bad("min_merge_count must be >= 1");
        }
        if !(self.min_region_size.is_finite() && self.min_region_size >= 0.0) {
            return bad("min_region_size must be >= 0");
        }
        Ok(())
    }

    /// Expansion ratio selected for a box of the given width.
    pub fn expansion_ratio(&self, width: f64) -> f64 {
        if width >= self.theta {
            self.beta1
        } else {
            self.beta2
        }
    }
}

/// Scales `b` about its centre by the width-selected ratio, without clipping.
pub fn expand_unclipped(b: &BBox, cfg: &FocuserConfig) -> BBox {
    let beta = cfg.expansion_ratio(b.w);
    let (cx, cy) = b.center();
    let w = b.w * beta;
    let h = b.h * beta;
    BBox {
        x: cx - w / 2.0,
        y: cy - h / 2.0,
        w,
        h,
        score: b.score,
    }
}

/// Adaptive object resizing: centre-preserving expansion clipped to the frame.
pub fn adaptive_resize(
    b: &BBox,
    cfg: &FocuserConfig,
    frame: &FrameSpec,
) -> Result<BBox, FocuserError> {
    Ok(clip_box(&expand_unclipped(b, cfg), frame)?)
}

/// A dense sub-region grown from one seed box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRegion {
    pub bounds: BBox,
    pub merged_count: usize,
    /// Indices into the expanded detection list, in absorption order.
    pub source_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeStats {
    pub outer_iterations: usize,
    pub merges: usize,
}

/// Dense region merging. See [`dense_region_merge_with_stats`].
pub fn dense_region_merge(extended: &[BBox]) -> Vec<SubRegion> {
    dense_region_merge_with_stats(extended).0
}

fn area_order(a: &(usize, BBox), b: &(usize, BBox)) -> Ordering {
    a.1.area()
        .total_cmp(&b.1.area())
        .then_with(|| a.1.lex_cmp(&b.1))
        .then(a.0.cmp(&b.0))
}

/// Repeatedly takes the smallest remaining box as a seed and absorbs any
/// remaining box that overlaps it (positive intersection area) into the
/// seed's enclosing box, until nothing overlaps. Each exhausted seed becomes
/// one sub-region.
///
/// Seeds are chosen by area, ties broken by `(x, y)` then `(w, h)`. The inner
/// scan visits remaining boxes in the same order and restarts after each
/// absorption.
pub fn dense_region_merge_with_stats(extended: &[BBox]) -> (Vec<SubRegion>, MergeStats) {
    let mut remaining: Vec<(usize, BBox)> = extended.iter().copied().enumerate().collect();
    remaining.sort_by(area_order);

    let mut stats = MergeStats::default();
    let mut regions = Vec::new();
    while !remaining.is_empty() {
        stats.outer_iterations += 1;
        let (seed_idx, seed) = remaining.remove(0);
        let mut bounds = seed.with_score(None);
        let mut sources = vec![seed_idx];
        while let Some(pos) = remaining.iter().position(|(_, b)| overlaps(&bounds, b)) {
            let (idx, b) = remaining.remove(pos);
            bounds = union_box(&bounds, &b);
            sources.push(idx);
            stats.merges += 1;
        }
        regions.push(SubRegion {
            bounds,
            merged_count: sources.len(),
            source_indices: sources,
        });
    }
    (regions, stats)
}

/// Everything an adapter receives for one region.
#[derive(Debug, Clone, Copy)]
pub struct RegionRequest<'a> {
    pub frame_id: &'a str,
    /// Index of the region in the merge output.
    pub region_index: usize,
    /// Integer-aligned crop rectangle in frame coordinates.
    pub crop: BBox,
    pub image: Option<&'a RgbImage>,
}

impl RegionRequest<'_> {
    /// Pixels of the crop. Fails when the frame image is not available.
    pub fn crop_image(&self) -> Result<RgbImage, AdapterError> {
        let img = self
            .image
            .ok_or_else(|| AdapterError::MissingImage(self.frame_id.to_string()))?;
        let x = (self.crop.x.max(0.0) as u32).min(img.width().saturating_sub(1));
        let y = (self.crop.y.max(0.0) as u32).min(img.height().saturating_sub(1));
        let w = (self.crop.w as u32).clamp(1, img.width() - x);
        let h = (self.crop.h as u32).clamp(1, img.height() - y);
        Ok(image::imageops::crop_imm(img, x, y, w, h).to_image())
    }
}

/// A detector that runs on a cropped region and reports boxes in
/// region-local coordinates.
///
/// Implementations must be callable from several threads at once unless
/// [`DetectorAdapter::is_serial`] returns true, in which case the pipeline
/// issues one call at a time.
pub trait DetectorAdapter: Send + Sync {
    fn detect(&self, request: &RegionRequest<'_>) -> Result<Vec<BBox>, AdapterError>;

    fn is_serial(&self) -> bool {
        false
    }

    fn needs_image(&self) -> bool {
        false
    }
}

/// Integer crop rectangle covering `b`, rounded outward and kept inside the frame.
pub fn crop_bounds(b: &BBox, frame: &FrameSpec) -> BBox {
    let x1 = b.x.floor().max(0.0);
    let y1 = b.y.floor().max(0.0);
    let x2 = b.right().ceil().min(frame.width.floor().max(x1 + 1.0));
    let y2 = b.bottom().ceil().min(frame.height.floor().max(y1 + 1.0));
    BBox {
        x: x1,
        y: y1,
        w: (x2 - x1).max(1.0),
        h: (y2 - y1).max(1.0),
        score: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegionErrorPolicy {
    #[default]
    Fail,
    /// Record the failure and continue with the remaining regions.
    Skip,
}

#[derive(Debug, Default)]
pub struct RefineOutcome {
    /// Fine-grained detections in frame coordinates.
    pub boxes: Vec<BBox>,
    /// Number of regions sent to the detector.
    pub detected_regions: usize,
    pub skipped: Vec<FocuserError>,
}

/// Whether a region is sent to the detector under `cfg`.
pub fn is_refinable(region: &SubRegion, cfg: &FocuserConfig) -> bool {
    region.merged_count >= cfg.min_merge_count
        && region.bounds.w >= cfg.min_region_size
        && region.bounds.h >= cfg.min_region_size
}

fn detect_region(
    detector: &dyn DetectorAdapter,
    frame_id: &str,
    region_index: usize,
    region: &SubRegion,
    image: Option<&RgbImage>,
    frame: &FrameSpec,
) -> Result<Vec<BBox>, FocuserError> {
    let crop = crop_bounds(&region.bounds, frame);
    let request = RegionRequest {
        frame_id,
        region_index,
        crop,
        image,
    };
    let wrap = |source: AdapterError| FocuserError::Region {
        frame_id: frame_id.to_string(),
        region_index,
        bounds: region.bounds,
        source: Box::new(source),
    };
    let local = detector.detect(&request).map_err(wrap)?;
    let local_extent = BBox {
        x: 0.0,
        y: 0.0,
        ..crop
    };
    local
        .into_iter()
        .map(|b| {
            let inside = clip_box(
                &b,
                &FrameSpec {
                    width: local_extent.w,
                    height: local_extent.h,
                },
            )
            .map_err(|_| wrap(AdapterError::OutOfRegion(b)))?;
            Ok(BBox {
                x: inside.x + crop.x,
                y: inside.y + crop.y,
                ..inside
            })
        })
        .collect()
}

/// Re-detects every eligible region and maps the results back to frame
/// coordinates. Output order follows region order.
pub fn refine_regions(
    frame_id: &str,
    regions: &[SubRegion],
    detector: &dyn DetectorAdapter,
    image: Option<&RgbImage>,
    frame: &FrameSpec,
    cfg: &FocuserConfig,
    policy: RegionErrorPolicy,
) -> Result<RefineOutcome, FocuserError> {
    let eligible: Vec<(usize, &SubRegion)> = regions
        .iter()
        .enumerate()
        .filter(|(_, r)| is_refinable(r, cfg))
        .collect();

    let run = |&(i, r): &(usize, &SubRegion)| detect_region(detector, frame_id, i, r, image, frame);
    let results: Vec<Result<Vec<BBox>, FocuserError>> = if detector.is_serial() {
        eligible.iter().map(run).collect()
    } else {
        eligible.par_iter().map(run).collect()
    };

    let mut outcome = RefineOutcome {
        detected_regions: eligible.len(),
        ..Default::default()
    };
    for result in results {
        match result {
            Ok(boxes) => outcome.boxes.extend(boxes),
            Err(e) if policy == RegionErrorPolicy::Skip => outcome.skipped.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok(outcome)
}

/// Class-agnostic greedy non-maximum suppression over `original ∪ fine`.
///
/// Candidates are visited by descending score; equal scores prefer boxes from
/// `original`, then lexicographic box order. A candidate is dropped when its
/// IoU with an already kept box exceeds `cfg.nms_iou`. The result is sorted by
/// descending score, then lexicographic box order.
pub fn fuse_detections(
    original: &[BBox],
    fine: &[BBox],
    cfg: &FocuserConfig,
) -> Result<Vec<BBox>, FocuserError> {
    let mut candidates: Vec<(f64, bool, BBox)> = Vec::with_capacity(original.len() + fine.len());
    for (index, (b, from_original)) in original
        .iter()
        .map(|b| (b, true))
        .chain(fine.iter().map(|b| (b, false)))
        .enumerate()
    {
        let score = b.score.ok_or(FocuserError::MissingScore { index })?;
        candidates.push((score, from_original, *b));
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(b.1.cmp(&a.1))
            .then_with(|| a.2.lex_cmp(&b.2))
    });

    let mut kept: Vec<BBox> = Vec::new();
    for (_, _, b) in candidates {
        if kept.iter().all(|k| iou(k, &b) <= cfg.nms_iou) {
            kept.push(b);
        }
    }
    kept.sort_by(|a, b| {
        b.score
            .unwrap_or(0.0)
            .total_cmp(&a.score.unwrap_or(0.0))
            .then_with(|| a.lex_cmp(b))
    });
    Ok(kept)
}

/// Per-stage counts of one focuser run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FocusCounts {
    pub original: usize,
    pub extended: usize,
    pub regions: usize,
    pub fine: usize,
    pub fused: usize,
}

#[derive(Debug, Default)]
pub struct FocusOutput {
    pub fused: Vec<BBox>,
    pub extended: Vec<BBox>,
    pub regions: Vec<SubRegion>,
    pub fine: Vec<BBox>,
    pub counts: FocusCounts,
    pub skipped: Vec<FocuserError>,
}

/// Runs the whole refinement pipeline on one frame.
///
/// Original boxes are first clipped to the frame, so every output box lies
/// inside it.
pub fn run_focuser(
    frame_id: &str,
    image: Option<&RgbImage>,
    original: &[BBox],
    detector: &dyn DetectorAdapter,
    cfg: &FocuserConfig,
    frame: &FrameSpec,
    policy: RegionErrorPolicy,
) -> Result<FocusOutput, FocuserError> {
    cfg.validate()?;
    if original.is_empty() {
        return Ok(FocusOutput::default());
    }
    let clipped = original
        .iter()
        .enumerate()
        .map(|(index, b)| {
            if b.score.is_none() {
                return Err(FocuserError::MissingScore { index });
            }
            Ok(clip_box(b, frame)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let extended = clipped
        .iter()
        .map(|b| adaptive_resize(b, cfg, frame))
        .collect::<Result<Vec<_>, _>>()?;
    let regions = dense_region_merge(&extended);
    let refined = refine_regions(frame_id, &regions, detector, image, frame, cfg, policy)?;
    let fine = refined
        .boxes
        .iter()
        .filter_map(|b| clip_box(b, frame).ok())
        .collect::<Vec<_>>();
    let fused = fuse_detections(&clipped, &fine, cfg)?;
    Ok(FocusOutput {
        counts: FocusCounts {
            original: original.len(),
            extended: extended.len(),
            regions: regions.len(),
            fine: fine.len(),
            fused: fused.len(),
        },
        fused,
        extended,
        regions,
        fine,
        skipped: refined.skipped,
    })
}
