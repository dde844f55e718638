//! Two-stage segmentation: a coarse pass on a resized copy of the volume
//! finds the region of interest, then a fine pass tiles that region with
//! non-overlapping patches, runs every model on three axis permutations of
//! each patch, and unions the binarized model outputs.
//!
//! Voxels are foreground when their probability is strictly greater than
//! the threshold.

use log::{debug, info};
use rayon::prelude::*;
use thiserror::Error;

use crate::fixpoint::{fixpoint_refine_traced, FixpointConfig};
use crate::grid::{bounding_box, resample_trilinear, BBox3, GridError, Mask3, Shape3, ViewAxis, Volume3};
use crate::unet::{sigmoid, Backend, Tensor5, UNetError};
use crate::windowing::{default_windows, make_channels, WindowError, WindowSpec};

/// HU used to pad the region of interest up to a whole number of patches.
pub const BACKGROUND_HU: f32 = -1024.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("coarse stage found no foreground above the threshold")]
    EmptyPrediction,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Model(#[from] UNetError),
}

/// How per-model binary masks are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    /// Sum of binarized outputs, foreground where the sum is positive.
    #[default]
    Union,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegConfig {
    pub coarse_shape: Shape3,
    pub fine_patch: Shape3,
    /// Added to each face of the coarse box before coordinate restoration.
    pub roi_margin_voxels: usize,
    pub threshold: f64,
    pub views: Vec<ViewAxis>,
    pub windows: Vec<WindowSpec>,
    pub fusion: Fusion,
    pub fixpoint: FixpointConfig,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            coarse_shape: [192; 3],
            fine_patch: [192; 3],
            roi_margin_voxels: 2,
            threshold: 0.5,
            views: ViewAxis::ALL.to_vec(),
            windows: default_windows(),
            fusion: Fusion::Union,
            fixpoint: FixpointConfig::default(),
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.coarse_shape.contains(&0) || self.fine_patch.contains(&0) {
            return bad("patch shapes must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if self.views.is_empty() {
            return bad("at least one view is required".into());
        }
        if self.windows.is_empty() {
            return bad("at least one window is required".into());
        }
        Ok(())
    }

    /// Checks shapes against a backend's divisibility requirement.
    pub fn validate_for(&self, backend: &dyn Backend) -> Result<(), PipelineError> {
        self.validate()?;
        let m = backend.spatial_multiple();
        for (what, s) in [("coarse_shape", self.coarse_shape), ("fine_patch", self.fine_patch)] {
            if s.iter().any(|n| n % m != 0) {
                return Err(PipelineError::InvalidConfig(format!(
                    "{what} {s:?} must be a multiple of {m} for backend '{}'",
                    backend.name()
                )));
            }
        }
        Ok(())
    }
}

/// Maps a voxel index from a resized grid back to the original grid:
/// `round(c * resized_spacing / original_spacing)`, rounding half up and
/// clamping to `[0, original_len - 1]`.
pub fn restore_coordinate(c: i64, resized_spacing: f64, original_spacing: f64, original_len: usize) -> usize {
    let v = (c as f64 * resized_spacing / original_spacing + 0.5).floor();
    v.clamp(0.0, original_len.saturating_sub(1) as f64) as usize
}

fn restore_box(coarse: &BBox3, margin: usize, original: &Volume3) -> BBox3 {
    let m = margin as i64;
    let spacing = original.spacing();
    let shape = original.shape();
    let lo =
        [0, 1, 2].map(|a| restore_coordinate(coarse.lo[a] as i64 - m, coarse.frame_spacing[a], spacing[a], shape[a]));
    let hi =
        [0, 1, 2].map(|a| restore_coordinate(coarse.hi[a] as i64 + m, coarse.frame_spacing[a], spacing[a], shape[a]));
    BBox3 { lo, hi, frame_spacing: spacing }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseLocation {
    /// Region of interest in original voxel coordinates.
    pub roi: BBox3,
    /// Tight foreground box on the resized grid, before the margin.
    pub coarse_box: BBox3,
}

fn threshold_mask(probs: &Tensor5, threshold: f64, like: &Volume3) -> Result<Mask3, GridError> {
    let data = probs.channel(0).iter().map(|&p| u8::from(p as f64 > threshold)).collect();
    Mask3::from_vec(probs.shape(), like.spacing(), data)
}

pub fn coarse_locate(vol: &Volume3, backend: &dyn Backend, cfg: &SegConfig) -> Result<CoarseLocation, PipelineError> {
    cfg.validate_for(backend)?;
    if vol.len() <= 1 {
        return Err(PipelineError::InvalidConfig("volume must have more than one voxel".into()));
    }
    let resized = resample_trilinear(vol, cfg.coarse_shape)?;
    let channels = make_channels(&resized, &cfg.windows)?;
    let logits = backend.infer(&Tensor5::from_multichannel(&channels))?;
    let mut probs = logits;
    for p in probs.data_mut() {
        *p = sigmoid(*p as f64) as f32;
    }
    let mask = threshold_mask(&probs, cfg.threshold, &resized)?;
    let coarse_box = match bounding_box(&mask) {
        Ok(b) => b,
        Err(GridError::EmptyMask) => return Err(PipelineError::EmptyPrediction),
        Err(e) => return Err(e.into()),
    };
    let roi = restore_box(&coarse_box, cfg.roi_margin_voxels, vol);
    debug!("coarse box {coarse_box} -> roi {roi}");
    Ok(CoarseLocation { roi, coarse_box })
}

/// Runs `backend` on each view of `patch`, maps the logits back to the
/// original axis order, averages them and applies the sigmoid once.
pub fn multiview_infer(patch: &Tensor5, backend: &dyn Backend, views: &[ViewAxis]) -> Result<Tensor5, PipelineError> {
    if views.is_empty() {
        return Err(PipelineError::InvalidConfig("at least one view is required".into()));
    }
    let n = patch.spatial_len();
    let mut sum = vec![0f64; n];
    for &view in views {
        let perm = view.permutation();
        let logits = backend.infer(&patch.permute_axes(perm))?;
        if logits.channels() != 1 || logits.spatial_len() != n {
            return Err(UNetError::ShapeMismatch(format!(
                "backend returned {} channels of {:?}",
                logits.channels(),
                logits.shape()
            ))
            .into());
        }
        let back = logits.inverse_permute_axes(perm);
        for (s, &v) in sum.iter_mut().zip(back.channel(0)) {
            *s += v as f64;
        }
    }
    let k = views.len() as f64;
    let probs = sum.into_iter().map(|s| sigmoid(s / k) as f32).collect();
    Ok(Tensor5::new(1, patch.shape(), probs)?)
}

/// One patch of a zero-overlap tiling. `extent` is the part of the patch
/// that lies inside the region; the rest is padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
}

/// Tiles `shape` with stride equal to `patch`, padding the far end up to a
/// whole number of patches.
pub fn plan_tiles(shape: Shape3, patch: Shape3) -> Vec<Tile> {
    let counts = [0, 1, 2].map(|a| shape[a].div_ceil(patch[a]));
    let mut tiles = Vec::with_capacity(counts.iter().product());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let origin = [i * patch[0], j * patch[1], k * patch[2]];
                let extent = [0, 1, 2].map(|a| patch[a].min(shape[a] - origin[a]));
                tiles.push(Tile { origin, extent });
            }
        }
    }
    tiles
}

fn extract_patch(roi: &Volume3, tile: &Tile, patch: Shape3) -> Volume3 {
    let mut out = Volume3::filled(patch, roi.spacing(), BACKGROUND_HU).expect("patch shape validated");
    for z in 0..tile.extent[2] {
        for y in 0..tile.extent[1] {
            let src = roi.index(tile.origin[0], tile.origin[1] + y, tile.origin[2] + z);
            let dst = out.index(0, y, z);
            out.data_mut()[dst..dst + tile.extent[0]].copy_from_slice(&roi.data()[src..src + tile.extent[0]]);
        }
    }
    out
}

/// Fine-stage inference over a cropped region. Returns one probability
/// volume per backend, each shaped like `roi`.
pub fn sliding_window_infer(
    roi: &Volume3,
    backends: &[&dyn Backend],
    cfg: &SegConfig,
) -> Result<Vec<Volume3>, PipelineError> {
    if backends.is_empty() {
        return Err(PipelineError::InvalidConfig("at least one fine model is required".into()));
    }
    for b in backends {
        cfg.validate_for(*b)?;
    }
    let tiles = plan_tiles(roi.shape(), cfg.fine_patch);
    debug!("{} tiles of {:?} over {:?}", tiles.len(), cfg.fine_patch, roi.shape());
    backends
        .iter()
        .map(|backend| {
            let pieces = tiles
                .par_iter()
                .map(|tile| {
                    let patch = extract_patch(roi, tile, cfg.fine_patch);
                    let channels = make_channels(&patch, &cfg.windows)?;
                    let probs = multiview_infer(&Tensor5::from_multichannel(&channels), *backend, &cfg.views)?;
                    let full = probs.to_volume(0, roi.spacing())?;
                    let valid = BBox3::new([0; 3], tile.extent.map(|e| e - 1), roi.spacing())?;
                    Ok(full.crop(&valid)?)
                })
                .collect::<Result<Vec<Volume3>, PipelineError>>()?;
            let mut out = Volume3::filled(roi.shape(), roi.spacing(), 0.0)?;
            for (tile, piece) in tiles.iter().zip(&pieces) {
                out.paste(piece, tile.origin)?;
            }
            Ok(out)
        })
        .collect()
}

/// Binarizes each probability map at `threshold` and takes the union.
pub fn fuse_models(probs: &[Volume3], threshold: f64) -> Result<Mask3, PipelineError> {
    let first = probs.first().ok_or_else(|| PipelineError::InvalidConfig("no model outputs to fuse".into()))?;
    let mut votes = vec![0u32; first.len()];
    for p in probs {
        if p.shape() != first.shape() {
            return Err(GridError::ShapeMismatch(p.shape(), first.shape()).into());
        }
        for (v, &x) in votes.iter_mut().zip(p.data()) {
            *v += u32::from(x as f64 > threshold);
        }
    }
    let data = votes.into_iter().map(|v| u8::from(v > 0)).collect();
    Ok(Mask3::from_vec(first.shape(), first.spacing(), data)?)
}

/// Patch sampling rule: a patch is positive when its centre voxel is
/// foreground in the label mask.
pub fn classify_patch(patch_bbox: &BBox3, label: &Mask3) -> Result<bool, GridError> {
    if !patch_bbox.fits(label.shape()) {
        return Err(GridError::BoxOutOfBounds { lo: patch_bbox.lo, hi: patch_bbox.hi, shape: label.shape() });
    }
    let c = [0, 1, 2].map(|a| patch_bbox.lo[a] + (patch_bbox.hi[a] - patch_bbox.lo[a]) / 2);
    Ok(label.get(c[0], c[1], c[2]) != 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: Mask3,
    pub location: CoarseLocation,
    /// Fused fine-stage mask before refinement.
    pub fine_mask: Mask3,
    /// Re-inference region of each refinement iteration.
    pub refine_regions: Vec<BBox3>,
}

/// Full inference: coarse localization, fine sliding-window inference on
/// the region of interest, model fusion, then fixpoint refinement.
pub fn segment(
    vol: &Volume3,
    coarse: &dyn Backend,
    fine: &[&dyn Backend],
    cfg: &SegConfig,
) -> Result<Segmentation, PipelineError> {
    let location = coarse_locate(vol, coarse, cfg)?;
    info!("region of interest {} ({:?} voxels)", location.roi, location.roi.shape());
    let roi_vol = vol.crop(&location.roi)?;
    let probs = sliding_window_infer(&roi_vol, fine, cfg)?;
    let fused = fuse_models(&probs, cfg.threshold)?;
    let mut fine_mask = Mask3::filled(vol.shape(), vol.spacing(), 0)?;
    fine_mask.paste(&fused, location.roi.lo)?;
    let (mask, refine_regions) = fixpoint_refine_traced(vol, &fine_mask, fine, &cfg.fixpoint, cfg)?;
    Ok(Segmentation { mask, location, fine_mask, refine_regions })
}
