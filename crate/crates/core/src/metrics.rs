//! Evaluation metrics: Dice overlap, 95th-percentile Hausdorff distance,
//! landmark error and non-diffeomorphic volume.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::deformation::non_diffeomorphic_volume;
use crate::volume::{neighbours6, quantile_sorted, sample_vector, GridGeometry, LabelVolume, MaskVolume, Vec3, VectorField};
use crate::{Error, Result};

/// Named points in voxel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub identifiers: Vec<String>,
    pub points: Vec<Vec3>,
}

impl LandmarkSet {
    pub fn new(identifiers: Vec<String>, points: Vec<Vec3>) -> Result<Self> {
        if identifiers.len() != points.len() {
            return Err(Error::StructureMismatch(format!(
                "{} identifiers for {} points",
                identifiers.len(),
                points.len()
            )));
        }
        Ok(Self { identifiers, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_inside(&self, geometry: &GridGeometry) -> Result<()> {
        for p in &self.points {
            if (0..3).any(|a| !(p[a] >= 0.0 && p[a] <= (geometry.shape[a] - 1) as f64)) {
                return Err(Error::InvalidGeometry(format!("landmark {p:?} outside the image")));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Vec3> {
        self.identifiers.iter().position(|s| s == id).map(|i| self.points[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_label: BTreeMap<u16, f64>,
    pub mean: f64,
}

pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<DiceReport> {
    a.geometry.ensure_same(&b.geometry, "dice")?;
    let mut counts: BTreeMap<u16, [usize; 3]> = BTreeMap::new();
    for (&x, &y) in a.data.iter().zip(&b.data) {
        if x != 0 {
            counts.entry(x).or_default()[0] += 1;
        }
        if y != 0 {
            counts.entry(y).or_default()[1] += 1;
        }
        if x != 0 && x == y {
            counts.entry(x).or_default()[2] += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyMask);
    }
    let per_label: BTreeMap<u16, f64> =
        counts.iter().map(|(&l, c)| (l, 2.0 * c[2] as f64 / (c[0] + c[1]) as f64)).collect();
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(DiceReport { per_label, mean })
}

/// Mask voxels with a 6-neighbour outside the mask or outside the image.
pub fn boundary(mask: &MaskVolume) -> MaskVolume {
    let g = mask.geometry;
    let data = (0..g.len())
        .map(|idx| {
            if !mask.data[idx] {
                return false;
            }
            let p = g.coords(idx);
            let inner = neighbours6(p, g.shape).count();
            inner < 6 || neighbours6(p, g.shape).any(|q| !mask.data[g.index(q[0], q[1], q[2])])
        })
        .collect();
    MaskVolume { geometry: g, data }
}

/// Exact 1-D squared distance transform of samples at positions `h * q`.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: usize = 0;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = h * q as f64;
        loop {
            let xv = h * v[k] as f64;
            let s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = h * q as f64;
        while z[k + 1] < xq {
            k += 1;
        }
        let d = xq - h * v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance (physical units) from every voxel to the nearest set voxel.
pub fn distance_transform(mask: &MaskVolume) -> Vec<f64> {
    let g = mask.geometry;
    let mut d: Vec<f64> = mask.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let strides = [g.shape[1] * g.shape[2], g.shape[2], 1];
    for axis in 0..3 {
        let n = g.shape[axis];
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        for start in 0..g.len() {
            if g.coords(start)[axis] != 0 {
                continue;
            }
            for x in 0..n {
                line[x] = d[start + x * strides[axis]];
            }
            edt_1d(&line, g.spacing[axis], &mut res);
            for x in 0..n {
                d[start + x * strides[axis]] = res[x];
            }
        }
    }
    d.into_iter().map(f64::sqrt).collect()
}

fn directed_95(from: &MaskVolume, to_dist: &[f64]) -> f64 {
    let mut d: Vec<f64> = from.data.iter().zip(to_dist).filter(|(b, _)| **b).map(|(_, &x)| x).collect();
    d.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&d, 0.95)
}

/// Max of the two directed 95th percentiles of boundary-to-boundary distances.
pub fn hd95(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    a.geometry.ensure_same(&b.geometry, "hd95")?;
    let ma = a.mask_of(label);
    let mb = b.mask_of(label);
    if ma.count() == 0 || mb.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let (ba, bb) = (boundary(&ma), boundary(&mb));
    let (da, db) = (distance_transform(&ba), distance_transform(&bb));
    Ok(directed_95(&ba, &db).max(directed_95(&bb, &da)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreReport {
    pub per_landmark: Vec<(String, f64)>,
    pub mean: f64,
}

/// Distance between each moving landmark and its fixed partner displaced by `u`.
pub fn tre(fixed_lm: &LandmarkSet, moving_lm: &LandmarkSet, u: &VectorField, spacing: Vec3) -> Result<TreReport> {
    if fixed_lm.len() != moving_lm.len() {
        return Err(Error::StructureMismatch("landmark sets differ in size".into()));
    }
    let mut per_landmark = Vec::with_capacity(fixed_lm.len());
    for (id, p) in fixed_lm.identifiers.iter().zip(&fixed_lm.points) {
        let q = moving_lm
            .get(id)
            .ok_or_else(|| Error::StructureMismatch(format!("landmark {id} missing from the moving set")))?;
        let d = sample_vector(&u.data, u.geometry.shape, *p);
        let e: f64 = (0..3).map(|a| ((p[a] + d[a] - q[a]) * spacing[a]).powi(2)).sum::<f64>().sqrt();
        per_landmark.push((id.clone(), e));
    }
    let mean = if per_landmark.is_empty() {
        0.0
    } else {
        per_landmark.iter().map(|x| x.1).sum::<f64>() / per_landmark.len() as f64
    };
    Ok(TreReport { per_landmark, mean })
}

pub fn ndv_metric(u: &VectorField) -> f64 {
    non_diffeomorphic_volume(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn labels_from(g: GridGeometry, mut f: impl FnMut(usize, usize, usize) -> u16) -> LabelVolume {
        let data = (0..g.len()).map(|idx| {
            let [i, j, k] = g.coords(idx);
            f(i, j, k)
        });
        LabelVolume { geometry: g, data: data.collect() }
    }

    fn brute_hd95(a: &MaskVolume, b: &MaskVolume) -> f64 {
        let g = a.geometry;
        let pts = |m: &MaskVolume| -> Vec<Vec3> {
            let bd = boundary(m);
            (0..g.len()).filter(|&i| bd.data[i]).map(|i| g.coords(i).map(|c| c as f64)).collect()
        };
        let (pa, pb) = (pts(a), pts(b));
        let directed = |from: &[Vec3], to: &[Vec3]| {
            let mut d: Vec<f64> = from
                .iter()
                .map(|p| {
                    to.iter()
                        .map(|q| (0..3).map(|x| ((p[x] - q[x]) * g.spacing[x]).powi(2)).sum::<f64>().sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            d.sort_by(|x, y| x.total_cmp(y));
            crate::volume::quantile(&d, 0.95)
        };
        directed(&pa, &pb).max(directed(&pb, &pa))
    }

    #[test]
    fn dice_formula_cases() {
        let g = GridGeometry::with_shape([10, 10, 10]).unwrap();
        let a = labels_from(g, |i, _, _| if i < 5 { 1 } else { 2 });
        let r = dice(&a, &a).unwrap();
        assert!(r.per_label.values().all(|&d| d == 1.0) && r.mean == 1.0);
        let b = labels_from(g, |i, _, _| if i >= 5 { 1 } else { 0 });
        assert_eq!(dice(&a, &b).unwrap().per_label[&1], 0.0);
        // |A| = 100, |B| = 50, overlap 25
        let a = labels_from(g, |i, j, _| u16::from(i == 0 && j < 10));
        let b = labels_from(g, |i, j, k| u16::from(i == 0 && ((j < 5 && k < 5) || (j >= 10))));
        let b2 = labels_from(g, |i, j, k| u16::from((i == 0 && j < 5 && k < 5) || (i == 1 && j < 5 && k < 5)));
        assert!(dice(&a, &b).unwrap().per_label[&1] == 2.0 * 25.0 / 125.0);
        assert!((dice(&a, &b2).unwrap().per_label[&1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn edt_matches_brute_force() {
        let g = GridGeometry::new([7, 9, 6], [1.0, 0.5, 2.0], [0.0; 3]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let m = MaskVolume { geometry: g, data: (0..g.len()).map(|_| rng.random::<f64>() < 0.05).collect() };
        let d = distance_transform(&m);
        for idx in 0..g.len() {
            let p = g.coords(idx);
            let best = (0..g.len())
                .filter(|&j| m.data[j])
                .map(|j| {
                    let q = g.coords(j);
                    (0..3).map(|a| ((p[a] as f64 - q[a] as f64) * g.spacing[a]).powi(2)).sum::<f64>().sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((d[idx] - best).abs() < 1e-9, "{} vs {best}", d[idx]);
        }
    }

    #[test]
    fn hd95_cases() {
        let g = GridGeometry::with_shape([14, 10, 10]).unwrap();
        let a = labels_from(g, |i, j, k| u16::from((1..7).contains(&i) && (2..8).contains(&j) && (2..8).contains(&k)));
        assert_eq!(hd95(&a, &a, 1).unwrap(), 0.0);
        let b = labels_from(g, |i, j, k| u16::from((4..10).contains(&i) && (2..8).contains(&j) && (2..8).contains(&k)));
        let h = hd95(&a, &b, 1).unwrap();
        assert!((h - 3.0).abs() < 1e-12);
        assert!((h - brute_hd95(&a.mask_of(1), &b.mask_of(1))).abs() < 1e-9);
        assert!(matches!(hd95(&a, &b, 7), Err(Error::EmptyMask)));
    }

    #[test]
    fn hd95_matches_all_pairs_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let g = GridGeometry::new([12, 10, 11], [1.0, 1.5, 0.75], [0.0; 3]).unwrap();
            let a = labels_from(g, |_, _, _| u16::from(rng.random::<f64>() < 0.3));
            let b = labels_from(g, |_, _, _| u16::from(rng.random::<f64>() < 0.2));
            let fast = hd95(&a, &b, 1).unwrap();
            assert!((fast - brute_hd95(&a.mask_of(1), &b.mask_of(1))).abs() < 1e-9);
            assert!((fast - hd95(&b, &a, 1).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn tre_cases() {
        let g = GridGeometry::with_shape([10, 10, 10]).unwrap();
        let ids: Vec<String> = (0..3).map(|i| format!("p{i}")).collect();
        let pts = vec![[2.0, 3.0, 4.0], [5.5, 1.25, 7.0], [8.0, 8.0, 0.5]];
        let fixed = LandmarkSet::new(ids.clone(), pts.clone()).unwrap();
        assert_eq!(tre(&fixed, &fixed, &VectorField::zeros(g), [1.0; 3]).unwrap().mean, 0.0);
        let t = [0.5, -1.0, 0.25];
        let moved = LandmarkSet::new(ids.clone(), pts.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect())
            .unwrap();
        assert!(tre(&fixed, &moved, &VectorField::constant(g, t), [1.0; 3]).unwrap().mean < 1e-15);
        // reordered identifiers still match
        let rev = LandmarkSet::new(ids.iter().rev().cloned().collect(), moved.points.iter().rev().cloned().collect()).unwrap();
        assert!(tre(&fixed, &rev, &VectorField::constant(g, t), [1.0; 3]).unwrap().mean < 1e-15);
        let other = LandmarkSet::new(vec!["a".into(), "b".into(), "c".into()], pts).unwrap();
        assert!(tre(&fixed, &other, &VectorField::zeros(g), [1.0; 3]).is_err());
    }
}
