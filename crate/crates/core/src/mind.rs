//! Modality independent neighbourhood descriptors.
//!
//! For an offset `r` the feature at voxel `x` is `exp(-D(x, x + r) / V(x))`,
//! where `D` is an unnormalised Gaussian-weighted sum of squared patch
//! differences and `V` is the mean of `D` over the six axis neighbours.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{filter_axis, GridGeometry, MaskVolume, ScalarVolume};

pub type Offset = [i64; 3];

pub const SIX_NEIGHBOURHOOD: [Offset; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Absolute variance floor used when the image has no variation at all.
pub const ABSOLUTE_VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MindParams {
    pub sigma: f64,
    pub offsets: Vec<Offset>,
    pub patch_radius: usize,
    pub variance_floor_rel: f64,
}

impl Default for MindParams {
    fn default() -> Self {
        Self::with_sigma(0.5)
    }
}

impl MindParams {
    /// Six-neighbourhood offsets and a patch lattice of half-width `ceil(3 sigma)`.
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            offsets: SIX_NEIGHBOURHOOD.to_vec(),
            patch_radius: ((3.0 * sigma).ceil() as usize).max(1),
            variance_floor_rel: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter("MIND sigma must be positive".into()));
        }
        if self.offsets.is_empty() {
            return Err(Error::InvalidParameter("MIND needs at least one offset".into()));
        }
        for (n, a) in self.offsets.iter().enumerate() {
            if self.offsets[..n].contains(a) {
                return Err(Error::InvalidParameter(format!("duplicate MIND offset {a:?}")));
            }
        }
        if self.patch_radius < 1 {
            return Err(Error::InvalidParameter("patch radius must be at least 1".into()));
        }
        if !(self.variance_floor_rel > 0.0) {
            return Err(Error::InvalidParameter("variance floor must be positive".into()));
        }
        Ok(())
    }

    /// 1D factor of the separable lattice weight `exp(-|p|^2 / sigma^2)`.
    fn weights_1d(&self) -> Vec<f64> {
        let r = self.patch_radius as i64;
        (-r..=r).map(|p| (-((p * p) as f64) / (self.sigma * self.sigma)).exp()).collect()
    }
}

/// One feature volume per offset, in offset order.
#[derive(Clone, Debug, PartialEq)]
pub struct MindVolume {
    pub geometry: GridGeometry,
    pub channels: Vec<ScalarVolume>,
}

impl MindVolume {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    fn ensure_compatible(&self, other: &MindVolume) -> Result<()> {
        self.geometry.ensure_same(&other.geometry, "MIND volumes")?;
        if self.channels.len() != other.channels.len() {
            return Err(Error::GeometryMismatch(format!(
                "channel counts {} and {}",
                self.channels.len(),
                other.channels.len()
            )));
        }
        Ok(())
    }
}

/// Gaussian-weighted patch SSD between `x` and `x + offset` for every voxel.
///
/// Image reads outside the grid clamp to the edge, both for the patch lattice
/// and for the shifted copy. The squared differences are evaluated on a grid
/// padded by the patch radius so that the separable lattice sum is exact.
pub fn patch_ssd(img: &ScalarVolume, offset: Offset, params: &MindParams) -> Result<ScalarVolume> {
    let shape = img.geometry.shape;
    for a in 0..3 {
        if offset[a].unsigned_abs() as usize > shape[a] {
            return Err(Error::InvalidParameter(format!("offset {offset:?} exceeds shape {shape:?}")));
        }
    }
    let pad = params.patch_radius;
    let padded = shape.map(|n| n + 2 * pad);
    let clamp = |c: i64, n: usize| c.clamp(0, n as i64 - 1) as usize;
    let mut sq = Vec::with_capacity(padded.iter().product());
    for pi in 0..padded[0] {
        let x = pi as i64 - pad as i64;
        let (a0, b0) = (clamp(x, shape[0]), clamp(x + offset[0], shape[0]));
        for pj in 0..padded[1] {
            let y = pj as i64 - pad as i64;
            let (a1, b1) = (clamp(y, shape[1]), clamp(y + offset[1], shape[1]));
            for pk in 0..padded[2] {
                let z = pk as i64 - pad as i64;
                let (a2, b2) = (clamp(z, shape[2]), clamp(z + offset[2], shape[2]));
                let d = img.at(a0, a1, a2) - img.at(b0, b1, b2);
                sq.push(d * d);
            }
        }
    }
    let w = params.weights_1d();
    for axis in 0..3 {
        sq = filter_axis(&sq, padded, axis, &w, false);
    }
    let padded_geom = GridGeometry { shape: padded, ..img.geometry };
    Ok(ScalarVolume::from_fn(img.geometry, |i, j, k| sq[padded_geom.index(i + pad, j + pad, k + pad)]))
}

/// Voxelwise mean of the six neighbourhood distances, floored at
/// `floor_rel` times its global mean (or an absolute 1e-12 if that mean is 0).
pub fn local_variance(distances: &[ScalarVolume], floor_rel: f64) -> Result<ScalarVolume> {
    if distances.len() != 6 {
        return Err(Error::InvalidParameter(format!("expected six distance volumes, got {}", distances.len())));
    }
    let geometry = distances[0].geometry;
    for d in &distances[1..] {
        geometry.ensure_same(&d.geometry, "local variance inputs")?;
    }
    let raw = raw_variance(distances);
    let floor = variance_floor(&raw, floor_rel);
    Ok(ScalarVolume { geometry, data: raw.into_iter().map(|v| v.max(floor)).collect() })
}

fn raw_variance(distances: &[ScalarVolume]) -> Vec<f64> {
    let n = distances[0].data.len();
    (0..n).map(|i| distances.iter().map(|d| d.data[i]).sum::<f64>() / 6.0).collect()
}

fn variance_floor(raw: &[f64], floor_rel: f64) -> f64 {
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if mean > 0.0 {
        floor_rel * mean
    } else {
        ABSOLUTE_VARIANCE_FLOOR
    }
}

/// Full MIND transform plus the mask of voxels where the variance floor did
/// not bind.
pub fn mind_transform_with_floor_mask(img: &ScalarVolume, params: &MindParams) -> Result<(MindVolume, MaskVolume)> {
    params.validate()?;
    let six: Vec<ScalarVolume> =
        SIX_NEIGHBOURHOOD.iter().map(|&o| patch_ssd(img, o, params)).collect::<Result<_>>()?;
    let raw = raw_variance(&six);
    let floor = variance_floor(&raw, params.variance_floor_rel);
    let active = MaskVolume { geometry: img.geometry, data: raw.iter().map(|&v| v > floor).collect() };
    let variance: Vec<f64> = raw.iter().map(|&v| v.max(floor)).collect();

    let mut channels = Vec::with_capacity(params.offsets.len());
    for &offset in &params.offsets {
        let d = match SIX_NEIGHBOURHOOD.iter().position(|&o| o == offset) {
            Some(n) => six[n].clone(),
            None => patch_ssd(img, offset, params)?,
        };
        let data = d.data.iter().zip(&variance).map(|(&dv, &v)| (-dv / v).exp().max(f64::MIN_POSITIVE)).collect();
        channels.push(ScalarVolume { geometry: img.geometry, data });
    }
    Ok((MindVolume { geometry: img.geometry, channels }, active))
}

pub fn mind_transform(img: &ScalarVolume, params: &MindParams) -> Result<MindVolume> {
    mind_transform_with_floor_mask(img, params).map(|(m, _)| m)
}

/// Mean squared feature difference over masked voxels and all channels.
pub fn mind_distance(a: &MindVolume, b: &MindVolume, mask: &MaskVolume) -> Result<f64> {
    a.ensure_compatible(b)?;
    a.geometry.ensure_same(&mask.geometry, "MIND distance mask")?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut acc = 0.0;
    for (ca, cb) in a.channels.iter().zip(&b.channels) {
        for ((&x, &y), &m) in ca.data.iter().zip(&cb.data).zip(&mask.data) {
            if m {
                acc += (x - y) * (x - y);
            }
        }
    }
    Ok(acc / (count * a.channels.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, seed: u64) -> ScalarVolume {
        let g = GridGeometry::with_shape([n, n, n]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ScalarVolume { geometry: g, data: (0..g.len()).map(|_| rng.random::<f64>()).collect() }
    }

    /// Literal lattice sum with clamp-to-edge image reads.
    fn brute_ssd(img: &ScalarVolume, r: Offset, params: &MindParams, x: [usize; 3]) -> f64 {
        let shape = img.geometry.shape;
        let read = |p: [i64; 3]| {
            img.at(
                p[0].clamp(0, shape[0] as i64 - 1) as usize,
                p[1].clamp(0, shape[1] as i64 - 1) as usize,
                p[2].clamp(0, shape[2] as i64 - 1) as usize,
            )
        };
        let rad = params.patch_radius as i64;
        let mut acc = 0.0;
        for a in -rad..=rad {
            for b in -rad..=rad {
                for c in -rad..=rad {
                    let w = (-((a * a + b * b + c * c) as f64) / (params.sigma * params.sigma)).exp();
                    let p = [x[0] as i64 + a, x[1] as i64 + b, x[2] as i64 + c];
                    let q = [p[0] + r[0], p[1] + r[1], p[2] + r[2]];
                    acc += w * (read(p) - read(q)).powi(2);
                }
            }
        }
        acc
    }

    #[test]
    fn ssd_of_constant_is_zero() {
        let g = GridGeometry::with_shape([6, 6, 6]).unwrap();
        let c = ScalarVolume::filled(g, 2.0);
        let d = patch_ssd(&c, [1, 0, -1], &MindParams::default()).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ssd_vanishes_for_image_equal_to_its_translate() {
        // An image that coincides with its own unit translate along axis 0.
        let base = random(10, 5);
        let g = base.geometry;
        let invariant = ScalarVolume::from_fn(g, |_, j, k| base.at(0, j, k));
        let d = patch_ssd(&invariant, [1, 0, 0], &MindParams::default()).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0));
        let d = patch_ssd(&invariant, [0, 1, 0], &MindParams::default()).unwrap();
        assert!(d.data.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn ssd_matches_brute_force() {
        let img = random(5, 11);
        let params = MindParams::default();
        let d = patch_ssd(&img, [1, 0, 0], &params).unwrap();
        for idx in 0..img.data.len() {
            let x = img.geometry.coords(idx);
            let expect = brute_ssd(&img, [1, 0, 0], &params, x);
            assert!((d.data[idx] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn variance_floor_and_mean() {
        let g = GridGeometry::with_shape([4, 4, 4]).unwrap();
        let zeros = vec![ScalarVolume::filled(g, 0.0); 6];
        let v = local_variance(&zeros, 1e-6).unwrap();
        assert!(v.data.iter().all(|&x| x == ABSOLUTE_VARIANCE_FLOOR));
        let sixes = vec![ScalarVolume::filled(g, 6.0); 6];
        let v = local_variance(&sixes, 1e-6).unwrap();
        assert!(v.data.iter().all(|&x| x == 6.0));

        let vols: Vec<ScalarVolume> = (0..6).map(|s| random(4, 100 + s)).collect();
        let v = local_variance(&vols, 1e-6).unwrap();
        for i in 0..v.data.len() {
            let m = vols.iter().map(|d| d.data[i]).sum::<f64>() / 6.0;
            assert!((v.data[i] - m).abs() < 1e-15);
        }
        assert!(local_variance(&vols[..5], 1e-6).is_err());
        let mut bad = vols.clone();
        bad[3] = random(5, 1);
        assert!(matches!(local_variance(&bad, 1e-6), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn constant_image_gives_unit_features() {
        let g = GridGeometry::with_shape([5, 5, 5]).unwrap();
        let m = mind_transform(&ScalarVolume::filled(g, 7.0), &MindParams::default()).unwrap();
        assert_eq!(m.channels.len(), 6);
        assert!(m.channels.iter().all(|c| c.data.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn equal_distances_give_exp_minus_one() {
        // Checkerboard: every axis neighbour differs by the same amount, so all
        // six D values coincide at interior voxels.
        let g = GridGeometry::with_shape([9, 9, 9]).unwrap();
        let img = ScalarVolume::from_fn(g, |i, j, k| ((i + j + k) % 2) as f64);
        let m = mind_transform(&img, &MindParams::default()).unwrap();
        for c in &m.channels {
            assert!((c.at(4, 4, 4) - (-1.0f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn mind_matches_brute_force() {
        let img = random(7, 21);
        let params = MindParams::default();
        let m = mind_transform(&img, &params).unwrap();
        let g = img.geometry;
        let raw: Vec<f64> = (0..g.len())
            .map(|idx| {
                SIX_NEIGHBOURHOOD.iter().map(|&n| brute_ssd(&img, n, &params, g.coords(idx))).sum::<f64>() / 6.0
            })
            .collect();
        let floor = params.variance_floor_rel * raw.iter().sum::<f64>() / raw.len() as f64;
        for (c, &r) in params.offsets.iter().enumerate() {
            for idx in 0..g.len() {
                let d = brute_ssd(&img, r, &params, g.coords(idx));
                let expect = (-d / raw[idx].max(floor)).exp();
                assert!((m.channels[c].data[idx] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sign_and_affine_invariance() {
        let img = random(8, 3);
        let params = MindParams::default();
        let (base, active) = mind_transform_with_floor_mask(&img, &params).unwrap();
        for (a, b) in [(-1.0, 0.0), (3.0, 2.0), (0.5, -1.0)] {
            let (m, act) = mind_transform_with_floor_mask(&img.map(|v| a * v + b), &params).unwrap();
            for (c0, c1) in base.channels.iter().zip(&m.channels) {
                for i in 0..c0.data.len() {
                    if active.data[i] && act.data[i] {
                        assert!((c0.data[i] - c1.data[i]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn distance_values_and_errors() {
        let g = GridGeometry::with_shape([4, 4, 4]).unwrap();
        let ones = MindVolume { geometry: g, channels: vec![ScalarVolume::filled(g, 1.0); 6] };
        let e = MindVolume { geometry: g, channels: vec![ScalarVolume::filled(g, (-1.0f64).exp()); 6] };
        let mask = MaskVolume::full(g);
        assert_eq!(mind_distance(&ones, &ones, &mask).unwrap(), 0.0);
        let d = mind_distance(&ones, &e, &mask).unwrap();
        assert!((d - (1.0 - (-1.0f64).exp()).powi(2)).abs() < 1e-12);
        assert!((d - 0.399576).abs() < 1e-6);
        let empty = MaskVolume { geometry: g, data: vec![false; g.len()] };
        assert!(matches!(mind_distance(&ones, &e, &empty), Err(Error::EmptyMask)));
        let fewer = MindVolume { geometry: g, channels: vec![ScalarVolume::filled(g, 1.0); 5] };
        assert!(mind_distance(&ones, &fewer, &mask).is_err());
    }

    #[test]
    fn distance_matches_masked_oracle() {
        let a = MindVolume { geometry: random(5, 1).geometry, channels: (0..6).map(|s| random(5, 40 + s)).collect() };
        let b = MindVolume { geometry: a.geometry, channels: (0..6).map(|s| random(5, 60 + s)).collect() };
        let mask = MaskVolume { geometry: a.geometry, data: (0..125).map(|i| i % 3 != 0).collect() };
        let mut acc = 0.0;
        let mut n = 0;
        for c in 0..6 {
            for i in 0..125 {
                if mask.data[i] {
                    acc += (a.channels[c].data[i] - b.channels[c].data[i]).powi(2);
                    n += 1;
                }
            }
        }
        assert!((mind_distance(&a, &b, &mask).unwrap() - acc / n as f64).abs() < 1e-14);
    }

    #[test]
    fn params_validation() {
        let mut p = MindParams::default();
        assert_eq!(p.patch_radius, 2);
        p.offsets.push([1, 0, 0]);
        assert!(p.validate().is_err());
        let mut p = MindParams::default();
        p.sigma = 0.0;
        assert!(p.validate().is_err());
    }
}
