//! Overlap and boundary metrics on binary masks.
//!
//! Point sets are the centres of foreground voxels, scaled by the grid
//! spacing, so distances come out in millimetres.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::grid::{GridError, Mask3};

fn check_aligned(a: &Mask3, b: &Mask3) -> Result<(), GridError> {
    if a.shape() != b.shape() {
        return Err(GridError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// `2|X ∩ Y| / (|X| + |Y|)`, and 1 when both masks are empty.
pub fn dice(pred: &Mask3, gt: &Mask3) -> Result<f64, GridError> {
    check_aligned(pred, gt)?;
    let (mut x, mut y, mut both) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p != 0, g != 0);
        x += u64::from(p);
        y += u64::from(g);
        both += u64::from(p && g);
    }
    if x + y == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (x + y) as f64)
}

/// One-dimensional squared distance transform with grid step `h` over
/// sampled values `f` (infinite where there is no site). Lower envelope of
/// parabolas; the winning parabola is re-checked against its neighbours so
/// that rounding in the intersection points cannot pick a worse site.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let h2 = h * h;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            let Some(&top) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + h2 * (q * q) as f64) - (f[top] + h2 * (top * top) as f64)) / (2.0 * h2 * (q - top) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let cost = |p: usize, q: usize| {
        let d = (p as i64 - q as i64) as f64 * h;
        f[q] + d * d
    };
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let mut best = cost(p, v[k]);
        if k > 0 {
            best = best.min(cost(p, v[k - 1]));
        }
        if k + 1 < v.len() {
            best = best.min(cost(p, v[k + 1]));
        }
        *o = best;
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest
/// foreground voxel of `mask`. Infinite everywhere when `mask` is empty.
pub fn squared_distance_transform(mask: &Mask3) -> Vec<f64> {
    let [nx, ny, nz] = mask.shape();
    let s = mask.spacing();
    let mut d: Vec<f64> = mask.data().iter().map(|&m| if m != 0 { 0.0 } else { f64::INFINITY }).collect();
    let longest = nx.max(ny).max(nz);
    let (mut v, mut z) = (Vec::with_capacity(longest), Vec::with_capacity(longest + 1));
    let mut line = vec![0f64; longest];
    let mut out = vec![0f64; longest];

    let strides = [1, nx, nx * ny];
    let lens = [nx, ny, nz];
    for axis in 0..3 {
        let n = lens[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for j in 0..lens[others[1]] {
            for i in 0..lens[others[0]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for t in 0..n {
                    line[t] = d[base + t * stride];
                }
                edt_1d(&line[..n], s[axis], &mut out[..n], &mut v, &mut z);
                for t in 0..n {
                    d[base + t * stride] = out[t];
                }
            }
        }
    }
    d
}

/// `max_{a in A} min_{b in B} |a - b|` in millimetres.
pub fn directed_hausdorff(a: &Mask3, b: &Mask3) -> Result<f64, GridError> {
    check_aligned(a, b)?;
    if a.count() == 0 || b.count() == 0 {
        return Err(GridError::EmptyMask);
    }
    let dt = squared_distance_transform(b);
    let worst = a.data().iter().zip(&dt).filter(|(&m, _)| m != 0).map(|(_, &d)| d).fold(0.0f64, f64::max);
    Ok(worst.sqrt())
}

/// Symmetric Hausdorff distance, the larger of the two directed values.
pub fn hausdorff(a: &Mask3, b: &Mask3) -> Result<f64, GridError> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Hausdorff distance with the conventions used in reports: 0 when both
/// masks are empty and infinity when exactly one is.
pub fn report_hausdorff(pred: &Mask3, gt: &Mask3) -> Result<f64, GridError> {
    check_aligned(pred, gt)?;
    match (pred.count() == 0, gt.count() == 0) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(f64::INFINITY),
        (false, false) => hausdorff(pred, gt),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub outcome: Result<(f64, f64), String>,
}

impl CaseMetrics {
    pub fn evaluate(case_id: impl Into<String>, pred: &Mask3, gt: &Mask3) -> Self {
        let outcome = dice(pred, gt).and_then(|d| Ok((d, report_hausdorff(pred, gt)?))).map_err(|e| e.to_string());
        Self { case_id: case_id.into(), outcome }
    }

    pub fn failed(case_id: impl Into<String>, error: impl Into<String>) -> Self {
        Self { case_id: case_id.into(), outcome: Err(error.into()) }
    }

    pub fn dice(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|m| m.0)
    }

    pub fn hausdorff_mm(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|m| m.1)
    }
}

/// Per-case results plus arithmetic means over the cases that succeeded.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_dice: Option<f64>,
    pub mean_hausdorff_mm: Option<f64>,
}

fn format_number(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_owned()
    } else {
        format!("{v}")
    }
}

fn json_number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(format_number(v))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let ok: Vec<(f64, f64)> = cases.iter().filter_map(|c| c.outcome.as_ref().ok().copied()).collect();
        let mean =
            |f: fn(&(f64, f64)) -> f64| (!ok.is_empty()).then(|| ok.iter().map(f).sum::<f64>() / ok.len() as f64);
        Self { mean_dice: mean(|m| m.0), mean_hausdorff_mm: mean(|m| m.1), cases }
    }

    pub fn failures(&self) -> usize {
        self.cases.iter().filter(|c| c.outcome.is_err()).count()
    }

    /// `case_id,dice,hd_mm,error`, one row per case. Failed cases leave the
    /// metric columns empty; infinite distances are written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,dice,hd_mm,error\n");
        for c in &self.cases {
            let id = csv_field(&c.case_id);
            match &c.outcome {
                Ok((d, h)) => writeln!(out, "{id},{},{},", format_number(*d), format_number(*h)),
                Err(e) => writeln!(out, "{id},,,{}", csv_field(e)),
            }
            .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let cases: Vec<Value> = self
            .cases
            .iter()
            .map(|c| match &c.outcome {
                Ok((d, h)) => json!({"case_id": c.case_id, "dice": json_number(*d), "hd_mm": json_number(*h)}),
                Err(e) => json!({"case_id": c.case_id, "error": e}),
            })
            .collect();
        json!({
            "cases": cases,
            "mean_dice": self.mean_dice.map(json_number),
            "mean_hd_mm": self.mean_hausdorff_mm.map(json_number),
            "failures": self.failures(),
        })
    }
}

/// Evaluates `(case_id, prediction, ground truth)` triples. Per-case
/// failures are recorded in the report rather than aborting the batch.
pub fn evaluate_set(pairs: &[(String, Mask3, Mask3)]) -> EvalReport {
    let cases = pairs.par_iter().map(|(id, pred, gt)| CaseMetrics::evaluate(id.clone(), pred, gt)).collect();
    EvalReport::from_cases(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid3, Spacing3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(shape: [usize; 3], spacing: Spacing3, pts: &[[usize; 3]]) -> Mask3 {
        let mut m = Mask3::filled(shape, spacing, 0).unwrap();
        for p in pts {
            m.set(p[0], p[1], p[2], 1);
        }
        m
    }

    fn brute_directed(a: &Mask3, b: &Mask3) -> f64 {
        let s = a.spacing();
        let fg = |m: &Mask3| -> Vec<[usize; 3]> {
            (0..m.len()).filter(|&i| m.data()[i] != 0).map(|i| m.coords(i)).collect()
        };
        let bs = fg(b);
        fg(a)
            .iter()
            .map(|p| {
                bs.iter()
                    .map(|q| {
                        let d: [f64; 3] = [0, 1, 2].map(|k| (p[k] as i64 - q[k] as i64) as f64 * s[k]);
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }

    fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3], spacing: Spacing3, p: f64) -> Mask3 {
        let mut m = Grid3::from_fn(shape, spacing, |_, _, _| rng.random_bool(p) as u8).unwrap();
        if m.count() == 0 {
            m.set(0, 0, 0, 1);
        }
        m
    }

    #[test]
    fn dice_arithmetic() {
        let a = points([4, 4, 4], [1.0; 3], &[[0, 0, 0], [1, 0, 0]]);
        let b = points([4, 4, 4], [1.0; 3], &[[1, 0, 0], [2, 0, 0]]);
        let c = points([4, 4, 4], [1.0; 3], &[[3, 3, 3]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let e = Mask3::filled([4, 4, 4], [1.0; 3], 0).unwrap();
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        let other = Mask3::filled([4, 4, 5], [1.0; 3], 0).unwrap();
        assert!(matches!(dice(&a, &other), Err(GridError::ShapeMismatch(..))));
    }

    #[test]
    fn three_four_five() {
        let a = points([5, 5, 1], [1.0; 3], &[[0, 0, 0]]);
        let b = points([5, 5, 1], [1.0; 3], &[[3, 4, 0]]);
        assert_eq!(directed_hausdorff(&a, &b).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn subset_and_single_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let big = random_mask(&mut rng, [10, 9, 8], [1.0, 2.0, 0.5], 0.3);
        let i = big.data().iter().position(|&v| v != 0).unwrap();
        let single = points(big.shape(), big.spacing(), &[big.coords(i)]);
        assert_eq!(directed_hausdorff(&single, &big).unwrap(), 0.0);
        assert_eq!(hausdorff(&single, &big).unwrap(), directed_hausdorff(&big, &single).unwrap());
    }

    #[test]
    fn empty_masks() {
        let a = points([4, 4, 4], [1.0; 3], &[[0, 0, 0]]);
        let e = Mask3::filled([4, 4, 4], [1.0; 3], 0).unwrap();
        assert!(matches!(directed_hausdorff(&a, &e), Err(GridError::EmptyMask)));
        assert_eq!(report_hausdorff(&a, &e).unwrap(), f64::INFINITY);
        assert_eq!(report_hausdorff(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let shape = [0, 1, 2].map(|_| rng.random_range(1..=16));
            let spacing = [0, 1, 2].map(|_| rng.random_range(0.3..2.5));
            let p = rng.random_range(0.005..0.3);
            let a = random_mask(&mut rng, shape, spacing, p);
            let b = random_mask(&mut rng, shape, spacing, p);
            assert_eq!(directed_hausdorff(&a, &b).unwrap(), brute_directed(&a, &b));
            assert_eq!(directed_hausdorff(&b, &a).unwrap(), brute_directed(&b, &a));
        }
    }

    #[test]
    fn spacing_scales_distance() {
        let a = points([8, 8, 8], [1.0, 1.0, 1.0], &[[0, 0, 0], [7, 1, 2]]);
        let b = points([8, 8, 8], [1.0, 1.0, 1.0], &[[3, 5, 6]]);
        let h = hausdorff(&a, &b).unwrap();
        let s = a.spacing().map(|v| v * 2.0);
        let a2 = a.clone().with_spacing(s).unwrap();
        let b2 = b.clone().with_spacing(s).unwrap();
        assert_eq!(hausdorff(&a2, &b2).unwrap(), 2.0 * h);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn directed_zero_iff_subset(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, [6, 5, 4], [1.0; 3], 0.2);
            let b = random_mask(&mut rng, [6, 5, 4], [1.0; 3], 0.5);
            let subset = a.data().iter().zip(b.data()).all(|(&x, &y)| x == 0 || y != 0);
            prop_assert_eq!(directed_hausdorff(&a, &b).unwrap() == 0.0, subset);
            let h = hausdorff(&a, &b).unwrap();
            let (ab, ba) = (directed_hausdorff(&a, &b).unwrap(), directed_hausdorff(&b, &a).unwrap());
            prop_assert!(h >= ab && h >= ba && (h == ab || h == ba));
            prop_assert_eq!(h, hausdorff(&b, &a).unwrap());
            let d = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&b, &a).unwrap());
        }
    }

    #[test]
    fn report_means_and_formats() {
        let a = points([4, 4, 4], [1.0; 3], &[[0, 0, 0]]);
        let e = Mask3::filled([4, 4, 4], [1.0; 3], 0).unwrap();
        let report = evaluate_set(&[("perfect".into(), a.clone(), a.clone())]);
        assert_eq!((report.mean_dice, report.mean_hausdorff_mm), (Some(1.0), Some(0.0)));

        let cases = vec![
            CaseMetrics { case_id: "a".into(), outcome: Ok((0.8, 1.0)) },
            CaseMetrics { case_id: "b".into(), outcome: Ok((0.9, 3.0)) },
            CaseMetrics::failed("c", "shape mismatch"),
        ];
        let r = EvalReport::from_cases(cases);
        assert!((r.mean_dice.unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(r.mean_hausdorff_mm, Some(2.0));
        assert_eq!(r.to_csv(), "case_id,dice,hd_mm,error\na,0.8,1,\nb,0.9,3,\nc,,,shape mismatch\n");

        let inf = evaluate_set(&[("x".into(), a, e)]);
        assert!(inf.to_csv().contains("x,0,inf,"));
        assert_eq!(inf.to_json()["cases"][0]["hd_mm"], "inf");
        assert_eq!(inf.to_json()["mean_hd_mm"], "inf");
    }
}
