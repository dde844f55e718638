//! Voxel grids and the geometric operations the pipeline relies on:
//! resampling, bounding boxes, cropping and view transposition.
//!
//! All grids store voxels with the first axis varying fastest, so the linear
//! index of `(x, y, z)` is `x + nx * (y + ny * z)`. Both interpolators use
//! corner-aligned sampling: output voxel `i` samples source position
//! `i * (n_in - 1) / (n_out - 1)`, which keeps the spacing ratio used for ROI
//! coordinate restoration exact.

use std::fmt;
use std::str::FromStr;

use log::warn;
use thiserror::Error;

pub type Shape3 = [usize; 3];
pub type Spacing3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid shape {0:?} has a zero-length axis")]
    EmptyShape(Shape3),
    #[error("spacing {0:?} must be finite and strictly positive")]
    BadSpacing(Spacing3),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Shape3 },
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("box {lo:?}..={hi:?} is invalid for grid {shape:?}")]
    BoxOutOfBounds { lo: Shape3, hi: Shape3, shape: Shape3 },
}

/// Dense 3D grid with per-axis voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    shape: Shape3,
    spacing: Spacing3,
    data: Vec<T>,
}

/// Scalar CT volume (Hounsfield units, or any derived real field).
pub type Volume3 = Grid3<f32>;
/// Binary mask; foreground is 1, background 0.
pub type Mask3 = Grid3<u8>;

fn check_shape(shape: Shape3) -> Result<usize, GridError> {
    if shape.contains(&0) {
        return Err(GridError::EmptyShape(shape));
    }
    shape.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n)).ok_or(GridError::EmptyShape(shape))
}

fn check_spacing(spacing: Spacing3) -> Result<(), GridError> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(GridError::BadSpacing(spacing))
    }
}

impl<T: Copy> Grid3<T> {
    pub fn from_vec(shape: Shape3, spacing: Spacing3, data: Vec<T>) -> Result<Self, GridError> {
        let len = check_shape(shape)?;
        check_spacing(spacing)?;
        if data.len() != len {
            return Err(GridError::LengthMismatch { len: data.len(), shape });
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn filled(shape: Shape3, spacing: Spacing3, value: T) -> Result<Self, GridError> {
        let len = check_shape(shape)?;
        Self::from_vec(shape, spacing, vec![value; len])
    }

    /// Builds a grid by evaluating `f(x, y, z)` in storage order.
    pub fn from_fn(
        shape: Shape3,
        spacing: Spacing3,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self, GridError> {
        let len = check_shape(shape)?;
        let mut data = Vec::with_capacity(len);
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_vec(shape, spacing, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_spacing(mut self, spacing: Spacing3) -> Result<Self, GridError> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.shape[0];
        let yz = idx / self.shape[0];
        [x, yz % self.shape[1], yz / self.shape[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// Maps every voxel through `f`, keeping shape and spacing.
    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 { shape: self.shape, spacing: self.spacing, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Copies the sub-grid covered by `bbox` (inclusive on both ends).
    pub fn crop(&self, bbox: &BBox3) -> Result<Self, GridError> {
        if !bbox.fits(self.shape) {
            return Err(GridError::BoxOutOfBounds { lo: bbox.lo, hi: bbox.hi, shape: self.shape });
        }
        let out_shape = bbox.shape();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for z in bbox.lo[2]..=bbox.hi[2] {
            for y in bbox.lo[1]..=bbox.hi[1] {
                let start = self.index(bbox.lo[0], y, z);
                data.extend_from_slice(&self.data[start..start + out_shape[0]]);
            }
        }
        Ok(Self { shape: out_shape, spacing: self.spacing, data })
    }

    /// Writes `src` into this grid with its first voxel at `origin`.
    pub fn paste(&mut self, src: &Self, origin: [usize; 3]) -> Result<(), GridError> {
        let s = src.shape;
        if (0..3).any(|a| origin[a] + s[a] > self.shape[a]) {
            return Err(GridError::BoxOutOfBounds {
                lo: origin,
                hi: [origin[0] + s[0] - 1, origin[1] + s[1] - 1, origin[2] + s[2] - 1],
                shape: self.shape,
            });
        }
        for z in 0..s[2] {
            for y in 0..s[1] {
                let dst = self.index(origin[0], origin[1] + y, origin[2] + z);
                let from = src.index(0, y, z);
                self.data[dst..dst + s[0]].copy_from_slice(&src.data[from..from + s[0]]);
            }
        }
        Ok(())
    }

    /// Permutes axes so that output axis `k` is input axis `perm[k]`.
    pub fn permute_axes(&self, perm: [usize; 3]) -> Self {
        let (shape, data) = permute_buffer(&self.data, self.shape, perm);
        Self { shape, spacing: perm.map(|a| self.spacing[a]), data }
    }
}

/// Axis permutation of a single x-fastest buffer. Output axis `k` is input
/// axis `perm[k]`.
pub(crate) fn permute_buffer<T: Copy>(src: &[T], shape: Shape3, perm: [usize; 3]) -> (Shape3, Vec<T>) {
    debug_assert!(is_permutation(perm));
    let out_shape = perm.map(|a| shape[a]);
    if perm == [0, 1, 2] {
        return (out_shape, src.to_vec());
    }
    let in_strides = [1, shape[0], shape[0] * shape[1]];
    let strides = perm.map(|a| in_strides[a]);
    let mut out = Vec::with_capacity(src.len());
    for k in 0..out_shape[2] {
        for j in 0..out_shape[1] {
            let base = j * strides[1] + k * strides[2];
            out.extend((0..out_shape[0]).map(|i| src[base + i * strides[0]]));
        }
    }
    (out_shape, out)
}

fn is_permutation(perm: [usize; 3]) -> bool {
    let mut seen = [false; 3];
    for a in perm {
        if a > 2 || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

pub(crate) fn invert_permutation(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (k, &a) in perm.iter().enumerate() {
        inv[a] = k;
    }
    inv
}

impl Mask3 {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Treats any nonzero value as foreground.
    pub fn binarized(&self) -> Self {
        self.map(|v| u8::from(v != 0))
    }
}

/// Inclusive voxel-index box, tagged with the spacing of the grid it lives in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox3 {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub frame_spacing: Spacing3,
}

impl BBox3 {
    pub fn new(lo: [usize; 3], hi: [usize; 3], frame_spacing: Spacing3) -> Result<Self, GridError> {
        check_spacing(frame_spacing)?;
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Err(GridError::BoxOutOfBounds { lo, hi, shape: [0; 3] });
        }
        Ok(Self { lo, hi, frame_spacing })
    }

    /// Box covering an entire grid.
    pub fn full(shape: Shape3, frame_spacing: Spacing3) -> Self {
        Self { lo: [0; 3], hi: shape.map(|n| n.saturating_sub(1)), frame_spacing }
    }

    pub fn shape(&self) -> Shape3 {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn voxel_count(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn fits(&self, shape: Shape3) -> bool {
        (0..3).all(|a| self.lo[a] <= self.hi[a] && self.hi[a] < shape[a])
    }

    pub fn contains_point(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn contains(&self, other: &BBox3) -> bool {
        (0..3).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }

    /// Grows every face outward by `n` voxels, clamped to `[0, shape - 1]`.
    pub fn dilate(&self, n: usize, shape: Shape3) -> Self {
        Self {
            lo: self.lo.map(|v| v.saturating_sub(n)),
            hi: [0, 1, 2].map(|a| (self.hi[a] + n).min(shape[a] - 1)),
            frame_spacing: self.frame_spacing,
        }
    }
}

impl fmt::Display for BBox3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:?}..={:?}]", self.lo, self.hi)
    }
}

/// Tightest inclusive box around the foreground of `mask`.
pub fn bounding_box(mask: &Mask3) -> Result<BBox3, GridError> {
    let [nx, ny, nz] = mask.shape;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            let row = &mask.data[mask.index(0, y, z)..mask.index(0, y, z) + nx];
            let Some(first) = row.iter().position(|&v| v != 0) else {
                continue;
            };
            let last = row.iter().rposition(|&v| v != 0).unwrap_or(first);
            any = true;
            lo[0] = lo[0].min(first);
            hi[0] = hi[0].max(last);
            lo[1] = lo[1].min(y);
            hi[1] = hi[1].max(y);
            lo[2] = lo[2].min(z);
            hi[2] = hi[2].max(z);
        }
    }
    if !any {
        return Err(GridError::EmptyMask);
    }
    Ok(BBox3 { lo, hi, frame_spacing: mask.spacing })
}

/// Anatomical viewing plane, realised as a fixed axis permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewAxis {
    /// Identity; also accepted as "horizontal".
    Axial,
    /// (x, z, y)
    Coronal,
    /// (z, y, x)
    Sagittal,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::Axial, ViewAxis::Coronal, ViewAxis::Sagittal];

    pub fn permutation(self) -> [usize; 3] {
        match self {
            ViewAxis::Axial => [0, 1, 2],
            ViewAxis::Coronal => [0, 2, 1],
            ViewAxis::Sagittal => [2, 1, 0],
        }
    }

    pub fn inverse_permutation(self) -> [usize; 3] {
        invert_permutation(self.permutation())
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewAxis::Axial => "axial",
            ViewAxis::Coronal => "coronal",
            ViewAxis::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for ViewAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" | "horizontal" => Ok(ViewAxis::Axial),
            "coronal" => Ok(ViewAxis::Coronal),
            "sagittal" => Ok(ViewAxis::Sagittal),
            other => Err(format!("unknown view '{other}'")),
        }
    }
}

pub fn transpose_view<T: Copy>(grid: &Grid3<T>, view: ViewAxis) -> Grid3<T> {
    grid.permute_axes(view.permutation())
}

pub fn inverse_transpose_view<T: Copy>(grid: &Grid3<T>, view: ViewAxis) -> Grid3<T> {
    grid.permute_axes(view.inverse_permutation())
}

/// Corner-aligned source position of output index `i`.
#[inline]
fn source_position(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out <= 1 || n_in <= 1 {
        0.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

fn resampled_spacing(spacing: Spacing3, from: Shape3, to: Shape3) -> Spacing3 {
    [0, 1, 2].map(|a| {
        if from[a] > 1 && to[a] > 1 {
            spacing[a] * (from[a] - 1) as f64 / (to[a] - 1) as f64
        } else {
            spacing[a] * from[a] as f64 / to[a] as f64
        }
    })
}

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    (0..n_out)
        .map(|i| {
            let pos = source_position(i, n_in, n_out).clamp(0.0, (n_in - 1) as f64);
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            Tap { i0, i1, frac: pos - i0 as f64 }
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Trilinear resampling to `target` voxels per axis. The returned volume
/// carries the spacing implied by corner-aligned sampling.
pub fn resample_trilinear(vol: &Volume3, target: Shape3) -> Result<Volume3, GridError> {
    check_shape(target)?;
    let src = vol.shape;
    for a in 0..3 {
        if src[a] == 1 && target[a] > 1 {
            warn!("axis {a} has a single voxel; replicating it to {} voxels", target[a]);
        }
    }
    let [tx, ty, tz] = [0, 1, 2].map(|a| taps(src[a], target[a]));
    let mut out = Vec::with_capacity(target.iter().product());
    let at = |x: usize, y: usize, z: usize| vol.data[x + src[0] * (y + src[1] * z)] as f64;
    for z in &tz {
        for y in &ty {
            for x in &tx {
                let c00 = lerp(at(x.i0, y.i0, z.i0), at(x.i1, y.i0, z.i0), x.frac);
                let c10 = lerp(at(x.i0, y.i1, z.i0), at(x.i1, y.i1, z.i0), x.frac);
                let c01 = lerp(at(x.i0, y.i0, z.i1), at(x.i1, y.i0, z.i1), x.frac);
                let c11 = lerp(at(x.i0, y.i1, z.i1), at(x.i1, y.i1, z.i1), x.frac);
                let c0 = lerp(c00, c10, y.frac);
                let c1 = lerp(c01, c11, y.frac);
                out.push(lerp(c0, c1, z.frac) as f32);
            }
        }
    }
    Grid3::from_vec(target, resampled_spacing(vol.spacing, src, target), out)
}

/// Nearest-neighbour resampling (round half up on the corner-aligned
/// source position). Works for any voxel type, so masks stay binary.
pub fn resample_nearest<T: Copy>(grid: &Grid3<T>, target: Shape3) -> Result<Grid3<T>, GridError> {
    check_shape(target)?;
    let src = grid.shape;
    let nearest = |a: usize| -> Vec<usize> {
        (0..target[a])
            .map(|i| ((source_position(i, src[a], target[a]) + 0.5).floor() as usize).min(src[a] - 1))
            .collect()
    };
    let [ix, iy, iz] = [0, 1, 2].map(nearest);
    let mut out = Vec::with_capacity(target.iter().product());
    for &z in &iz {
        for &y in &iy {
            let row = src[0] * (y + src[1] * z);
            out.extend(ix.iter().map(|&x| grid.data[row + x]));
        }
    }
    Grid3::from_vec(target, resampled_spacing(grid.spacing, src, target), out)
}
