//! Overlap, folding and landmark metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::diff::{det3, jacobian_at};
use crate::volume::{sample_displacement, FieldKind, JacobianScheme, LabelVolume, VectorField};

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    /// Labels that occur in at least one input, ascending.
    pub labels: Vec<u16>,
    pub per_label: Vec<f64>,
    /// Mean over `labels`; 1 when no requested label occurs in either input.
    pub mean: f64,
}

/// Labels `1..count`, i.e. everything but background.
pub fn foreground_labels(count: u16) -> Vec<u16> {
    (1..count).collect()
}

/// Per-label Dice over `labels`. Labels absent from both volumes are left out.
pub fn dice(a: &LabelVolume, b: &LabelVolume, labels: &[u16]) -> Result<DiceReport> {
    a.shape().ensure_same(&b.shape())?;
    let size = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut inter = vec![0u64; size];
    let mut count_a = vec![0u64; size];
    let mut count_b = vec![0u64; size];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as usize, y as usize);
        if x < size {
            count_a[x] += 1;
        }
        if y < size {
            count_b[y] += 1;
        }
        if x == y && x < size {
            inter[x] += 1;
        }
    }
    let mut report = DiceReport { labels: Vec::new(), per_label: Vec::new(), mean: 1.0 };
    for &l in labels {
        let l_ = l as usize;
        let denom = count_a[l_] + count_b[l_];
        if denom == 0 {
            continue;
        }
        report.labels.push(l);
        report.per_label.push(2.0 * inter[l_] as f64 / denom as f64);
    }
    if !report.per_label.is_empty() {
        report.mean = report.per_label.iter().sum::<f64>() / report.per_label.len() as f64;
    }
    Ok(report)
}

/// How folded volume is accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NdvMode {
    /// Each of the eight one-sided schemes with a non-positive determinant
    /// contributes an eighth of the voxel.
    #[default]
    Fractional,
    /// A voxel counts fully when any one-sided scheme folds.
    Counting,
    /// A voxel counts when the central-difference determinant folds.
    Central,
}

/// Percentage of interior volume that is non-diffeomorphic.
pub fn ndv_percent<T: Real>(phi: &VectorField<T>, mode: NdvMode) -> Result<f64> {
    phi.ensure_kind(FieldKind::Deformation)?;
    let shape = phi.shape();
    let schemes = JacobianScheme::all_one_sided();
    let mut folded = 0.0;
    let mut interior = 0usize;
    for (idx, c) in shape.iter().enumerate() {
        if !shape.is_interior(c, 1) {
            continue;
        }
        interior += 1;
        folded += match mode {
            NdvMode::Central => (det3(jacobian_at(phi, idx, c, JacobianScheme::Central)) <= 0.0) as u32 as f64,
            NdvMode::Counting | NdvMode::Fractional => {
                let bad = schemes.iter().filter(|&&s| det3(jacobian_at(phi, idx, c, s)) <= 0.0).count();
                if mode == NdvMode::Counting {
                    (bad > 0) as u32 as f64
                } else {
                    bad as f64 / 8.0
                }
            }
        };
    }
    if interior == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * folded / interior as f64)
}

/// Points in voxel coordinates with the voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 3]>,
    pub spacing: [f64; 3],
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 3]>, spacing: [f64; 3]) -> Self {
        LandmarkSet { points, spacing }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when every point lies inside a grid of `dims` voxels.
    pub fn within(&self, dims: [usize; 3]) -> bool {
        self.points.iter().all(|p| (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreReport {
    pub distances_mm: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Maps each fixed landmark through `phi` and measures the distance in mm to
/// its moving counterpart, using the fixed set's spacing.
pub fn tre<T: Real>(moving: &LandmarkSet, fixed: &LandmarkSet, phi: &VectorField<T>) -> Result<TreReport> {
    phi.ensure_kind(FieldKind::Deformation)?;
    if moving.len() != fixed.len() {
        return Err(Error::LandmarkCountMismatch(moving.len(), fixed.len()));
    }
    if fixed.is_empty() {
        return Err(Error::LandmarkCountMismatch(0, 0));
    }
    let u = phi.to_displacement()?;
    let distances_mm: Vec<f64> = fixed
        .points
        .iter()
        .zip(&moving.points)
        .map(|(x, y)| {
            let d = sample_displacement(&u, x.map(T::of));
            (0..3)
                .map(|a| {
                    let e = (x[a] + d[a].f64() - y[a]) * fixed.spacing[a];
                    e * e
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let n = distances_mm.len() as f64;
    let mean = distances_mm.iter().sum::<f64>() / n;
    let std = (distances_mm.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(TreReport { distances_mm, mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;

    fn half_masks() -> (LabelVolume, LabelVolume) {
        let s = Shape3::cube(4).unwrap();
        let a = s.iter().map(|[i, _, _]| (i < 2) as u16).collect();
        let b = s.iter().map(|[_, j, _]| (j < 2) as u16).collect();
        (LabelVolume::from_vec(s, a, 2).unwrap(), LabelVolume::from_vec(s, b, 2).unwrap())
    }

    #[test]
    fn dice_cases() {
        let (a, b) = half_masks();
        assert_eq!(dice(&a, &a, &[1]).unwrap().mean, 1.0);
        assert_eq!(dice(&a, &b, &[1]).unwrap().mean, 0.5);
        let inv = LabelVolume::from_vec(a.shape(), a.data().iter().map(|l| 1 - l).collect(), 2).unwrap();
        assert_eq!(dice(&a, &inv, &[1]).unwrap().mean, 0.0);
    }

    #[test]
    fn dice_skips_absent_labels() {
        let s = Shape3::cube(3).unwrap();
        let a = LabelVolume::filled(s, 1, 4).unwrap();
        let r = dice(&a, &a, &[1, 2, 3]).unwrap();
        assert_eq!(r.labels, vec![1]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn ndv_identity_and_fold() {
        let s = Shape3::cube(8).unwrap();
        let id = VectorField::<f64>::identity(s);
        for mode in [NdvMode::Fractional, NdvMode::Counting, NdvMode::Central] {
            assert_eq!(ndv_percent(&id, mode).unwrap(), 0.0);
        }
        // reflect x about 3.5 on the slab x in [2, 5]
        let fold = VectorField::from_fn(s, FieldKind::Deformation, |[i, j, k]| {
            let x = i as f64;
            [if (2..=5).contains(&i) { 7.0 - x } else { x }, j as f64, k as f64]
        });
        for mode in [NdvMode::Fractional, NdvMode::Counting, NdvMode::Central] {
            assert!(ndv_percent(&fold, mode).unwrap() > 0.0, "{mode:?}");
        }
    }

    #[test]
    fn tre_identity_and_units() {
        let s = Shape3::cube(6).unwrap();
        let id = VectorField::<f64>::identity(s);
        let fixed = LandmarkSet::new(vec![[1.0, 1.0, 1.0], [2.0, 3.0, 4.0]], [1.0; 3]);
        let moving = LandmarkSet::new(vec![[1.0, 1.0, 2.0], [2.0, 3.0, 4.0]], [1.0; 3]);
        let r = tre(&moving, &fixed, &id).unwrap();
        assert_eq!(r.distances_mm, vec![1.0, 0.0]);
        let fixed2 = LandmarkSet { spacing: [2.0; 3], ..fixed.clone() };
        assert_eq!(tre(&moving, &fixed2, &id).unwrap().distances_mm, vec![2.0, 0.0]);
        let short = LandmarkSet::new(vec![[0.0; 3]], [1.0; 3]);
        assert!(matches!(tre(&short, &fixed, &id), Err(Error::LandmarkCountMismatch(1, 2))));
    }
}
