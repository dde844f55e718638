//! Deterministic synthetic CT volumes with an exactly known vessel mask.
//!
//! A curved trunk tube runs along z and straight branch tubes leave it at
//! random points. Tubes are the set of voxel centres within `radius` of a
//! centreline, measured in voxel units. Spacing only labels the output grid.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::grid::{Mask3, Shape3, Spacing3, Volume3};

pub const MIN_PHANTOM_EDGE: usize = 16;
const TRUNK_SEGMENTS: usize = 32;
const BRANCH_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("degenerate phantom: {0}")]
    DegenerateSpec(String),
}

/// A sphere painted into the volume but left out of the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub hu: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub spacing: Spacing3,
    pub seed: u64,
    pub trunk_radius: f64,
    pub branch_radius: f64,
    pub branch_count: usize,
    pub trunk_hu: f32,
    pub branch_hu: f32,
    pub background_hu: f32,
    pub noise_std: f64,
    pub blob: Option<Blob>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64; 3],
            spacing: [1.0; 3],
            seed: 0,
            trunk_radius: 4.0,
            branch_radius: 2.0,
            branch_count: 4,
            trunk_hu: 150.0,
            branch_hu: -450.0,
            background_hu: -1024.0,
            noise_std: 20.0,
            blob: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl Segment {
    pub fn distance_sq(&self, p: [f64; 3]) -> f64 {
        let ab = [0, 1, 2].map(|k| self.b[k] - self.a[k]);
        let ap = [0, 1, 2].map(|k| p[k] - self.a[k]);
        let len_sq = dot(ab, ab);
        let t = if len_sq > 0.0 { (dot(ap, ab) / len_sq).clamp(0.0, 1.0) } else { 0.0 };
        let d = [0, 1, 2].map(|k| ap[k] - t * ab[k]);
        dot(d, d)
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Centrelines of a phantom, in voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub trunk: Vec<Segment>,
    pub branches: Vec<Segment>,
}

impl PhantomGeometry {
    pub fn in_trunk(&self, p: [f64; 3], radius: f64) -> bool {
        self.trunk.iter().any(|s| s.distance_sq(p) <= radius * radius)
    }

    pub fn in_branch(&self, p: [f64; 3], radius: f64) -> bool {
        self.branches.iter().any(|s| s.distance_sq(p) <= radius * radius)
    }
}

fn degenerate<T>(msg: impl Into<String>) -> Result<T, PhantomError> {
    Err(PhantomError::DegenerateSpec(msg.into()))
}

fn validate(spec: &PhantomSpec) -> Result<(), PhantomError> {
    if spec.shape.iter().any(|&n| n < MIN_PHANTOM_EDGE) {
        return degenerate(format!("shape {:?} is below {MIN_PHANTOM_EDGE} on some axis", spec.shape));
    }
    if spec.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return degenerate(format!("spacing {:?} must be positive", spec.spacing));
    }
    let radius_ok = |r: f64| r.is_finite() && r >= 1.0;
    if !radius_ok(spec.trunk_radius) || !radius_ok(spec.branch_radius) {
        return degenerate("tube radii must be at least 1 voxel");
    }
    if !(spec.noise_std.is_finite() && spec.noise_std >= 0.0) {
        return degenerate(format!("noise std {} must be non-negative", spec.noise_std));
    }
    if let Some(b) = &spec.blob {
        let fits =
            (0..3).all(|k| b.center[k] - b.radius >= 0.0 && b.center[k] + b.radius <= (spec.shape[k] - 1) as f64);
        if !radius_ok(b.radius) || !fits {
            return degenerate(format!("blob at {:?} with radius {} does not fit", b.center, b.radius));
        }
    }
    Ok(())
}

/// Draws the trunk and branch centrelines for `spec`.
pub fn phantom_geometry(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<PhantomGeometry, PhantomError> {
    validate(spec)?;
    let [nx, ny, nz] = spec.shape.map(|n| n as f64);
    let r = spec.trunk_radius;
    let amp = 0.12 * nx.min(ny);
    let (cx, cy) = ((nx - 1.0) / 2.0, (ny - 1.0) / 2.0);
    if cx - amp - r < 1.0 || cy - amp - r < 1.0 || nz - 3.0 - 2.0 * r < 4.0 {
        return degenerate(format!("trunk of radius {r} does not fit in {:?}", spec.shape));
    }
    let phase = rng.random_range(0.0..2.0 * PI);
    let (z0, z1) = (r + 1.0, nz - 2.0 - r);
    let point =
        |t: f64| [cx + amp * (PI * t + phase).sin(), cy + 0.5 * amp * (2.0 * PI * t + phase).cos(), z0 + t * (z1 - z0)];
    let trunk: Vec<Segment> = (0..TRUNK_SEGMENTS)
        .map(|i| Segment {
            a: point(i as f64 / TRUNK_SEGMENTS as f64),
            b: point((i + 1) as f64 / TRUNK_SEGMENTS as f64),
        })
        .collect();

    let rb = spec.branch_radius;
    let lo = rb + 1.0;
    let hi = [nx, ny, nz].map(|n| n - 2.0 - rb);
    let min_len = 0.15 * nx.min(ny).min(nz);
    let mut branches = Vec::with_capacity(spec.branch_count);
    for idx in 0..spec.branch_count {
        let mut placed = None;
        for _ in 0..BRANCH_ATTEMPTS {
            let start = point(rng.random_range(0.15..0.85));
            let g: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(&mut *rng));
            let norm = dot(g, g).sqrt();
            if norm < 1e-9 {
                continue;
            }
            let dir = g.map(|v| v / norm);
            // Longest step along dir that keeps the end inside the box.
            let max_len = (0..3)
                .map(|k| match dir[k] {
                    d if d > 0.0 => (hi[k] - start[k]) / d,
                    d if d < 0.0 => (lo - start[k]) / d,
                    _ => f64::INFINITY,
                })
                .fold(f64::INFINITY, f64::min);
            if max_len < min_len {
                continue;
            }
            let len = rng.random_range(min_len..=max_len.min(0.45 * nx.min(ny).min(nz)).max(min_len));
            placed = Some(Segment { a: start, b: [0, 1, 2].map(|k| start[k] + len * dir[k]) });
            break;
        }
        match placed {
            Some(s) => branches.push(s),
            None => return degenerate(format!("branch {idx} does not fit in {:?}", spec.shape)),
        }
    }
    Ok(PhantomGeometry { trunk, branches })
}

/// Marks every voxel centre within `radius` of `seg`, visiting only the
/// segment's bounding box.
fn rasterize(seg: &Segment, radius: f64, shape: Shape3, mut mark: impl FnMut(usize)) {
    let range = |k: usize| {
        let lo = (seg.a[k].min(seg.b[k]) - radius).ceil().max(0.0) as usize;
        let hi = (seg.a[k].max(seg.b[k]) + radius).floor().min((shape[k] - 1) as f64);
        if hi < 0.0 {
            return 0..0;
        }
        lo..hi as usize + 1
    };
    let r2 = radius * radius;
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                if seg.distance_sq([x as f64, y as f64, z as f64]) <= r2 {
                    mark(x + shape[0] * (y + shape[1] * z));
                }
            }
        }
    }
}

/// Returns the phantom volume (HU) and its ground-truth vessel mask.
/// Identical specs give bit-identical outputs.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3, Mask3), PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = phantom_geometry(spec, &mut rng)?;
    let shape = spec.shape;
    let n: usize = shape.iter().product();

    // 0 background, 1 branch, 2 trunk; trunk wins where tubes overlap.
    let mut class = vec![0u8; n];
    for seg in &geometry.branches {
        rasterize(seg, spec.branch_radius, shape, |i| class[i] = class[i].max(1));
    }
    for seg in &geometry.trunk {
        rasterize(seg, spec.trunk_radius, shape, |i| class[i] = 2);
    }
    let mask_data: Vec<u8> = class.iter().map(|&c| u8::from(c > 0)).collect();
    let mut vol_data: Vec<f32> = class
        .iter()
        .map(|&c| match c {
            2 => spec.trunk_hu,
            1 => spec.branch_hu,
            _ => spec.background_hu,
        })
        .collect();

    if let Some(blob) = &spec.blob {
        let seg = Segment { a: blob.center, b: blob.center };
        rasterize(&seg, blob.radius, shape, |i| {
            if class[i] == 0 {
                vol_data[i] = blob.hu;
            }
        });
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated noise std");
        for v in &mut vol_data {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
    }

    let volume = Volume3::from_vec(shape, spec.spacing, vol_data).expect("validated shape");
    let mask = Mask3::from_vec(shape, spec.spacing, mask_data).expect("validated shape");
    Ok((volume, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixpoint::{connected_components, Connectivity};
    use std::collections::BTreeSet;

    fn quiet(branch_count: usize) -> PhantomSpec {
        PhantomSpec {
            shape: [32, 28, 36],
            branch_count,
            noise_std: 0.0,
            seed: 5,
            trunk_radius: 3.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn trunk_only_matches_predicate() {
        let spec = quiet(0);
        let (vol, mask) = generate_phantom(&spec).unwrap();
        let distinct: BTreeSet<u32> = vol.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(distinct.len(), 2);
        let geometry = phantom_geometry(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)).unwrap();
        for i in 0..mask.len() {
            let c = mask.coords(i).map(|v| v as f64);
            assert_eq!(mask.data()[i] != 0, geometry.in_trunk(c, spec.trunk_radius));
            let hu = if mask.data()[i] != 0 { spec.trunk_hu } else { spec.background_hu };
            assert_eq!(vol.data()[i], hu);
        }
    }

    #[test]
    fn branches_match_predicate() {
        let spec = quiet(5);
        let (vol, mask) = generate_phantom(&spec).unwrap();
        let geometry = phantom_geometry(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)).unwrap();
        assert_eq!(geometry.branches.len(), 5);
        for i in 0..mask.len() {
            let c = mask.coords(i).map(|v| v as f64);
            let trunk = geometry.in_trunk(c, spec.trunk_radius);
            let branch = geometry.in_branch(c, spec.branch_radius);
            assert_eq!(mask.data()[i] != 0, trunk || branch);
            let hu = match (trunk, branch) {
                (true, _) => spec.trunk_hu,
                (false, true) => spec.branch_hu,
                _ => spec.background_hu,
            };
            assert_eq!(vol.data()[i], hu);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec { shape: [24; 3], ..PhantomSpec::default() };
        let (a, ma) = generate_phantom(&spec).unwrap();
        let (b, mb) = generate_phantom(&spec).unwrap();
        let bits = |v: &Volume3| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(ma, mb);
        let (c, _) = generate_phantom(&PhantomSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn ground_truth_is_one_component() {
        for seed in 0..10 {
            let spec = PhantomSpec { seed, shape: [48; 3], branch_count: 6, ..PhantomSpec::default() };
            let (_, mask) = generate_phantom(&spec).unwrap();
            assert_eq!(connected_components(&mask, Connectivity::TwentySix).count(), 1, "seed {seed}");
            let frac = mask.count() as f64 / mask.len() as f64;
            assert!((0.001..0.10).contains(&frac), "foreground fraction {frac}");
        }
    }

    #[test]
    fn blob_is_painted_but_not_labelled() {
        let blob = Blob { center: [3.0, 3.0, 3.0], radius: 2.0, hu: 150.0 };
        let spec = PhantomSpec { blob: Some(blob), ..quiet(0) };
        let (vol, mask) = generate_phantom(&spec).unwrap();
        assert_eq!(vol.get(3, 3, 3), 150.0);
        assert_eq!(mask.get(3, 3, 3), 0);
    }

    #[test]
    fn degenerate_specs() {
        let bad = [
            PhantomSpec { shape: [15, 32, 32], ..PhantomSpec::default() },
            PhantomSpec { trunk_radius: 0.5, ..PhantomSpec::default() },
            PhantomSpec { shape: [16; 3], trunk_radius: 7.0, ..PhantomSpec::default() },
            PhantomSpec { noise_std: -1.0, ..PhantomSpec::default() },
            PhantomSpec { blob: Some(Blob { center: [0.0; 3], radius: 3.0, hu: 0.0 }), ..PhantomSpec::default() },
        ];
        for spec in bad {
            assert!(matches!(generate_phantom(&spec), Err(PhantomError::DegenerateSpec(_))), "{spec:?}");
        }
    }
}
