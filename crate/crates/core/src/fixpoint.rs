//! Iterated false-positive suppression: keep the largest connected
//! component, grow its bounding box, re-run the fine stage inside that box
//! and discard everything outside it.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::grid::{bounding_box, BBox3, Grid3, GridError, Mask3, Volume3};
use crate::pipeline::{fuse_models, sliding_window_infer, PipelineError, SegConfig};
use crate::unet::Backend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Faces, edges and corners.
    #[default]
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut v = Vec::with_capacity(26);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Six => "6",
            Connectivity::TwentySix => "26",
        })
    }
}

impl FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "6" => Ok(Connectivity::Six),
            "26" => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixpointConfig {
    pub iterations: usize,
    pub expand_voxels: usize,
    pub connectivity: Connectivity,
}

impl Default for FixpointConfig {
    fn default() -> Self {
        Self { iterations: 2, expand_voxels: 5, connectivity: Connectivity::TwentySix }
    }
}

/// Component labels (0 = background, then 1.. in order of first voxel in
/// scan order) and the voxel count of each label.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub labels: Grid3<u32>,
    /// `sizes[l - 1]` is the size of label `l`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Breadth-first labelling with an explicit queue.
pub fn connected_components(mask: &Mask3, connectivity: Connectivity) -> Components {
    let shape = mask.shape();
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let c = mask.coords(idx);
            for off in &offsets {
                let n = [0, 1, 2].map(|a| c[a] as isize + off[a]);
                if (0..3).any(|a| n[a] < 0 || n[a] >= shape[a] as isize) {
                    continue;
                }
                let j = mask.index(n[0] as usize, n[1] as usize, n[2] as usize);
                if mask.data()[j] != 0 && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    let labels = Grid3::from_vec(shape, mask.spacing(), labels).expect("same shape as mask");
    Components { labels, sizes }
}

/// Keeps only the largest component; on ties the lowest label wins.
pub fn max_component(mask: &Mask3, connectivity: Connectivity) -> Result<Mask3, GridError> {
    let comps = connected_components(mask, connectivity);
    let mut best: Option<(usize, usize)> = None;
    for (i, &s) in comps.sizes.iter().enumerate() {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    let (best, _) = best.ok_or(GridError::EmptyMask)?;
    let keep = best as u32 + 1;
    Ok(comps.labels.map(|l| u8::from(l == keep)))
}

/// Bounding box of the foreground grown by `n` voxels per face, clamped to
/// the grid.
pub fn expand_region(mask: &Mask3, n: usize) -> Result<BBox3, GridError> {
    Ok(bounding_box(mask)?.dilate(n, mask.shape()))
}

/// Runs the refinement and also returns the re-inference region used by
/// each completed iteration.
pub fn fixpoint_refine_traced(
    vol: &Volume3,
    mask: &Mask3,
    backends: &[&dyn Backend],
    cfg: &FixpointConfig,
    seg: &SegConfig,
) -> Result<(Mask3, Vec<BBox3>), PipelineError> {
    if vol.shape() != mask.shape() {
        return Err(GridError::ShapeMismatch(vol.shape(), mask.shape()).into());
    }
    let mut current = mask.clone();
    let mut regions = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let core = match max_component(&current, cfg.connectivity) {
            Ok(m) => m,
            Err(GridError::EmptyMask) => {
                warn!("fixpoint iteration {}: mask is empty, keeping previous result", it + 1);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let region = expand_region(&core, cfg.expand_voxels)?;
        let crop = vol.crop(&region)?;
        let probs = sliding_window_infer(&crop, backends, seg)?;
        let fused = fuse_models(&probs, seg.threshold)?;
        let mut next = Mask3::filled(vol.shape(), vol.spacing(), 0)?;
        next.paste(&fused, region.lo)?;
        regions.push(region);
        if next.count() == 0 {
            warn!("fixpoint iteration {}: re-inference produced no foreground, keeping previous result", it + 1);
            break;
        }
        current = next;
    }
    Ok((current, regions))
}

pub fn fixpoint_refine(
    vol: &Volume3,
    mask: &Mask3,
    backends: &[&dyn Backend],
    cfg: &FixpointConfig,
    seg: &SegConfig,
) -> Result<Mask3, PipelineError> {
    fixpoint_refine_traced(vol, mask, backends, cfg, seg).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::AnalyticBackend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn blocks(shape: [usize; 3], boxes: &[([usize; 3], usize)]) -> Mask3 {
        Grid3::from_fn(shape, [1.0; 3], |x, y, z| {
            boxes.iter().any(|(o, s)| {
                (o[0]..o[0] + s).contains(&x) && (o[1]..o[1] + s).contains(&y) && (o[2]..o[2] + s).contains(&z)
            }) as u8
        })
        .unwrap()
    }

    fn flood(mask: &Mask3, labels: &mut [u32], c: [usize; 3], label: u32, conn: Connectivity) {
        let i = mask.index(c[0], c[1], c[2]);
        if mask.data()[i] == 0 || labels[i] != 0 {
            return;
        }
        labels[i] = label;
        for off in conn.offsets() {
            let n = [0, 1, 2].map(|a| c[a] as isize + off[a]);
            if (0..3).all(|a| n[a] >= 0 && n[a] < mask.shape()[a] as isize) {
                flood(mask, labels, n.map(|v| v as usize), label, conn);
            }
        }
    }

    /// Recursive flood fill, visiting seeds in reverse scan order so labels
    /// differ from the implementation's.
    fn oracle_labels(mask: &Mask3, conn: Connectivity) -> Vec<u32> {
        let mut labels = vec![0u32; mask.len()];
        let mut next = 1;
        for i in (0..mask.len()).rev() {
            if mask.data()[i] != 0 && labels[i] == 0 {
                flood(mask, &mut labels, mask.coords(i), next, conn);
                next += 1;
            }
        }
        labels
    }

    fn same_partition(a: &[u32], b: &[u32]) -> bool {
        let mut ab = HashMap::new();
        let mut ba = HashMap::new();
        a.iter()
            .zip(b)
            .all(|(&x, &y)| (x == 0) == (y == 0) && *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
    }

    #[test]
    fn two_blocks_two_components() {
        let m = blocks([8, 8, 8], &[([0, 0, 0], 2), ([5, 5, 5], 2)]);
        let c = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(c.sizes, vec![8, 8]);
        let mut single = Mask3::filled([3, 3, 3], [1.0; 3], 0).unwrap();
        single.set(1, 1, 1, 1);
        assert_eq!(connected_components(&single, Connectivity::Six).sizes, vec![1]);
        let empty = Mask3::filled([3, 3, 3], [1.0; 3], 0).unwrap();
        assert_eq!(connected_components(&empty, Connectivity::Six).count(), 0);
    }

    #[test]
    fn diagonal_neighbours_depend_on_connectivity() {
        let mut m = Mask3::filled([3, 3, 3], [1.0; 3], 0).unwrap();
        m.set(0, 0, 0, 1);
        m.set(1, 1, 1, 1);
        assert_eq!(connected_components(&m, Connectivity::Six).count(), 2);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count(), 1);
    }

    #[test]
    fn labelling_matches_flood_fill_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let m = Grid3::from_fn([12, 12, 12], [1.0; 3], |_, _, _| rng.random_bool(0.3) as u8).unwrap();
            for conn in [Connectivity::Six, Connectivity::TwentySix] {
                let c = connected_components(&m, conn);
                assert!(same_partition(c.labels.data(), &oracle_labels(&m, conn)));
                assert_eq!(c.sizes.iter().sum::<usize>(), m.count());
            }
        }
    }

    #[test]
    fn largest_component_survives() {
        let m = blocks([10, 10, 10], &[([0, 0, 0], 2), ([5, 5, 5], 3)]);
        let big = max_component(&m, Connectivity::TwentySix).unwrap();
        assert_eq!(big, blocks([10, 10, 10], &[([5, 5, 5], 3)]));
        assert_eq!(max_component(&big, Connectivity::TwentySix).unwrap(), big);
    }

    #[test]
    fn ties_keep_first_in_scan_order() {
        let m = blocks([10, 10, 10], &[([6, 6, 6], 2), ([0, 0, 0], 2)]);
        let a = max_component(&m, Connectivity::TwentySix).unwrap();
        assert_eq!(a, blocks([10, 10, 10], &[([0, 0, 0], 2)]));
        assert_eq!(max_component(&m, Connectivity::TwentySix).unwrap(), a);
        let empty = Mask3::filled([2, 2, 2], [1.0; 3], 0).unwrap();
        assert_eq!(max_component(&empty, Connectivity::Six), Err(GridError::EmptyMask));
    }

    #[test]
    fn region_expansion() {
        let m = blocks([30, 30, 30], &[([10, 12, 14], 3)]);
        let tight = expand_region(&m, 0).unwrap();
        assert_eq!((tight.lo, tight.hi), ([10, 12, 14], [12, 14, 16]));
        let grown = expand_region(&m, 5).unwrap();
        assert_eq!((grown.lo, grown.hi), ([5, 7, 9], [17, 19, 21]));
        let edge = blocks([30, 30, 30], &[([0, 27, 1], 3)]);
        let e = expand_region(&edge, 5).unwrap();
        assert_eq!((e.lo, e.hi), ([0, 22, 0], [7, 29, 8]));
    }

    fn blob_volume(shape: [usize; 3], boxes: &[([usize; 3], usize)]) -> Volume3 {
        blocks(shape, boxes).map(|v| if v == 1 { 150.0 } else { -1024.0 })
    }

    fn small_cfg() -> SegConfig {
        SegConfig { fine_patch: [8, 8, 8], ..SegConfig::default() }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let vol = blob_volume([16, 16, 16], &[([2, 2, 2], 4)]);
        let noisy = blocks([16, 16, 16], &[([1, 1, 1], 2), ([10, 10, 10], 3)]);
        let cfg = FixpointConfig { iterations: 0, ..FixpointConfig::default() };
        let b = AnalyticBackend::default();
        let out = fixpoint_refine(&vol, &noisy, &[&b], &cfg, &small_cfg()).unwrap();
        assert_eq!(out, noisy);
    }

    #[test]
    fn consistent_mask_is_a_fixed_point() {
        let vol = blob_volume([20, 20, 20], &[([6, 6, 6], 5)]);
        let truth = blocks([20, 20, 20], &[([6, 6, 6], 5)]);
        let b = AnalyticBackend::default();
        let out = fixpoint_refine(&vol, &truth, &[&b], &FixpointConfig::default(), &small_cfg()).unwrap();
        assert_eq!(out, truth);
    }

    #[test]
    fn distant_blob_is_removed() {
        let shape = [32, 32, 32];
        let vol = blob_volume(shape, &[([4, 4, 4], 6), ([24, 24, 24], 3)]);
        let initial = blocks(shape, &[([4, 4, 4], 6), ([24, 24, 24], 3)]);
        let b = AnalyticBackend::default();
        let cfg = FixpointConfig { iterations: 1, ..FixpointConfig::default() };
        let (out, regions) = fixpoint_refine_traced(&vol, &initial, &[&b], &cfg, &small_cfg()).unwrap();
        assert_eq!(out, blocks(shape, &[([4, 4, 4], 6)]));
        assert_eq!(connected_components(&out, Connectivity::TwentySix).count(), 1);
        let region = regions.last().unwrap();
        for i in 0..out.len() {
            if out.data()[i] == 1 {
                assert!(region.contains_point(out.coords(i)));
            }
        }
    }

    #[test]
    fn empty_input_is_returned_unchanged() {
        let vol = blob_volume([8, 8, 8], &[]);
        let empty = Mask3::filled([8, 8, 8], [1.0; 3], 0).unwrap();
        let b = AnalyticBackend::default();
        let out = fixpoint_refine(&vol, &empty, &[&b], &FixpointConfig::default(), &small_cfg()).unwrap();
        assert_eq!(out, empty);
    }
}
