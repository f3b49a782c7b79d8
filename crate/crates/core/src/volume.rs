//! Grid geometry, scalar/vector/mask/label volumes, trilinear interpolation,
//! separable Gaussian filtering, pyramid decimation and foreground masking.
//!
//! Voxel data is stored row-major with the last axis fastest: the linear index
//! of voxel `(i, j, k)` is `(i * n1 + j) * n2 + k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Shape, spacing and origin of a regular 3D grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub shape: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl GridGeometry {
    pub const MIN_EXTENT: usize = 4;

    pub fn new(shape: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        if shape.iter().any(|&n| n < Self::MIN_EXTENT) {
            return Err(Error::InvalidGeometry(format!(
                "every axis needs at least {} voxels, got {:?}",
                Self::MIN_EXTENT,
                shape
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry("origin must be finite".into()));
        }
        Ok(Self { shape, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn with_shape(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.shape[2];
        let rest = idx / self.shape[2];
        [rest / self.shape[1], rest % self.shape[1], k]
    }

    /// Same shape check used by every binary operation.
    pub fn ensure_same(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::GeometryMismatch(format!(
                "{what}: shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Geometry after taking every second voxel starting at index 0.
    pub fn halved(&self) -> GridGeometry {
        GridGeometry {
            shape: self.shape.map(|n| n.div_ceil(2)),
            spacing: self.spacing.map(|s| 2.0 * s),
            origin: self.origin,
        }
    }
}

/// Scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    pub geometry: GridGeometry,
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(geometry: GridGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("volume contains non-finite values".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: GridGeometry, value: f64) -> Self {
        Self { data: vec![value; geometry.len()], geometry }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let [n0, n1, n2] = geometry.shape;
        let mut data = Vec::with_capacity(geometry.len());
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { geometry, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.min_max();
        lo == hi
    }

    /// Trilinear interpolation with clamp-to-edge at the given voxel-coordinate points.
    pub fn trilinear_sample(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        points
            .iter()
            .map(|p| {
                if p.iter().any(|c| !c.is_finite()) {
                    return Err(Error::NonFiniteCoordinate);
                }
                Ok(sample_scalar(&self.data, self.geometry.shape, *p))
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarVolume {
        ScalarVolume { geometry: self.geometry, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Displacement field in voxel units, one 3-vector per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub geometry: GridGeometry,
    pub data: Vec<Vec3>,
}

impl VectorField {
    pub fn new(geometry: GridGeometry, data: Vec<Vec3>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!(
                "field length {} does not match shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("field contains non-finite values".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        Self { data: vec![[0.0; 3]; geometry.len()], geometry }
    }

    pub fn constant(geometry: GridGeometry, t: Vec3) -> Self {
        Self { data: vec![t; geometry.len()], geometry }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn(usize, usize, usize) -> Vec3) -> Self {
        let [n0, n1, n2] = geometry.shape;
        let mut data = Vec::with_capacity(geometry.len());
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { geometry, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn sample(&self, p: Vec3) -> Vec3 {
        sample_vector(&self.data, self.geometry.shape, p)
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| norm(*v)).fold(0.0, f64::max)
    }

    /// Component-wise mean over the voxels selected by `mask`.
    pub fn masked_mean(&self, mask: &MaskVolume) -> Vec3 {
        let mut acc = [0.0; 3];
        let mut count = 0usize;
        for (v, &m) in self.data.iter().zip(&mask.data) {
            if m {
                for a in 0..3 {
                    acc[a] += v[a];
                }
                count += 1;
            }
        }
        acc.map(|s| s / count.max(1) as f64)
    }
}

/// Boolean foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub geometry: GridGeometry,
    pub data: Vec<bool>,
}

impl MaskVolume {
    pub fn new(geometry: GridGeometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidGeometry("mask length does not match shape".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn full(geometry: GridGeometry) -> Self {
        Self { data: vec![true; geometry.len()], geometry }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// 6-neighbourhood dilation; out-of-bounds neighbours are ignored.
    pub fn dilate(&self) -> MaskVolume {
        let g = self.geometry;
        let [n0, n1, n2] = g.shape;
        let mut out = self.data.clone();
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    let idx = g.index(i, j, k);
                    if self.data[idx] {
                        continue;
                    }
                    out[idx] = neighbours6([i, j, k], g.shape).any(|[a, b, c]| self.data[g.index(a, b, c)]);
                }
            }
        }
        MaskVolume { geometry: g, data: out }
    }

    /// 6-neighbourhood erosion; out-of-bounds neighbours count as foreground.
    pub fn erode(&self) -> MaskVolume {
        let g = self.geometry;
        let [n0, n1, n2] = g.shape;
        let mut out = self.data.clone();
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    let idx = g.index(i, j, k);
                    if !self.data[idx] {
                        continue;
                    }
                    out[idx] = neighbours6([i, j, k], g.shape).all(|[a, b, c]| self.data[g.index(a, b, c)]);
                }
            }
        }
        MaskVolume { geometry: g, data: out }
    }

    pub fn close(&self) -> MaskVolume {
        self.dilate().erode()
    }

    pub fn dilate_by(&self, steps: usize) -> MaskVolume {
        (0..steps).fold(self.clone(), |m, _| m.dilate())
    }

    /// Voxels `(f*i, f*j, f*k)` of this mask on the decimated grid `target`.
    pub fn subsample(&self, factor: usize, target: GridGeometry) -> MaskVolume {
        let [n0, n1, n2] = target.shape;
        let mut data = Vec::with_capacity(target.len());
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    data.push(self.data[self.geometry.index(i * factor, j * factor, k * factor)]);
                }
            }
        }
        MaskVolume { geometry: target, data }
    }
}

/// Integer label volume, 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub geometry: GridGeometry,
    pub data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(geometry: GridGeometry, data: Vec<u16>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidGeometry("label length does not match shape".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn mask_of(&self, label: u16) -> MaskVolume {
        MaskVolume { geometry: self.geometry, data: self.data.iter().map(|&l| l == label).collect() }
    }

    /// Sorted distinct nonzero labels.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

pub(crate) fn neighbours6(p: [usize; 3], shape: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    const STEPS: [(usize, isize); 6] = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)];
    STEPS.into_iter().filter_map(move |(axis, d)| {
        let c = p[axis] as isize + d;
        if c < 0 || c >= shape[axis] as isize {
            return None;
        }
        let mut q = p;
        q[axis] = c as usize;
        Some(q)
    })
}

#[inline]
pub(crate) fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Per-axis cell index and fractional offset after clamping to `[0, n-1]`.
/// The flag reports whether the coordinate lay strictly inside the domain,
/// i.e. whether the interpolant depends on it.
#[inline]
fn cell(x: f64, n: usize) -> (usize, f64, bool) {
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&x);
    let xc = x.clamp(0.0, hi);
    let i0 = (xc as usize).min(n - 2);
    (i0, xc - i0 as f64, inside)
}

/// Trilinear sample of raw row-major data with clamp-to-edge.
#[inline]
pub fn sample_scalar(data: &[f64], shape: [usize; 3], p: Vec3) -> f64 {
    let (i0, tx, _) = cell(p[0], shape[0]);
    let (j0, ty, _) = cell(p[1], shape[1]);
    let (k0, tz, _) = cell(p[2], shape[2]);
    let s1 = shape[2];
    let s0 = shape[1] * shape[2];
    let base = i0 * s0 + j0 * s1 + k0;
    let c = |o: usize| data[base + o];
    let c00 = c(0) * (1.0 - tz) + c(1) * tz;
    let c01 = c(s1) * (1.0 - tz) + c(s1 + 1) * tz;
    let c10 = c(s0) * (1.0 - tz) + c(s0 + 1) * tz;
    let c11 = c(s0 + s1) * (1.0 - tz) + c(s0 + s1 + 1) * tz;
    let c0 = c00 * (1.0 - ty) + c01 * ty;
    let c1 = c10 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tx) + c1 * tx
}

/// Cell of a trilinear sample: base index, fractional offsets and whether
/// each axis was inside the domain (clamped axes have zero derivative).
#[derive(Clone, Copy, Debug)]
pub struct TrilinearCell {
    pub base: usize,
    pub t: Vec3,
    pub inside: [bool; 3],
}

#[inline]
pub fn trilinear_cell(shape: [usize; 3], p: Vec3) -> TrilinearCell {
    let (i0, tx, inx) = cell(p[0], shape[0]);
    let (j0, ty, iny) = cell(p[1], shape[1]);
    let (k0, tz, inz) = cell(p[2], shape[2]);
    TrilinearCell { base: (i0 * shape[1] + j0) * shape[2] + k0, t: [tx, ty, tz], inside: [inx, iny, inz] }
}

/// Value and spatial gradient of `data` in a precomputed cell.
#[inline]
pub fn sample_in_cell(data: &[f64], shape: [usize; 3], cell: &TrilinearCell) -> (f64, Vec3) {
    let s1 = shape[2];
    let s0 = shape[1] * shape[2];
    let [tx, ty, tz] = cell.t;
    let c = |o: usize| data[cell.base + o];
    let (v000, v001, v010, v011) = (c(0), c(1), c(s1), c(s1 + 1));
    let (v100, v101, v110, v111) = (c(s0), c(s0 + 1), c(s0 + s1), c(s0 + s1 + 1));
    let c00 = v000 + (v001 - v000) * tz;
    let c01 = v010 + (v011 - v010) * tz;
    let c10 = v100 + (v101 - v100) * tz;
    let c11 = v110 + (v111 - v110) * tz;
    let c0 = c00 + (c01 - c00) * ty;
    let c1 = c10 + (c11 - c10) * ty;
    let value = c0 + (c1 - c0) * tx;
    let dx = if cell.inside[0] { c1 - c0 } else { 0.0 };
    let dy = if cell.inside[1] { (c01 - c00) * (1.0 - tx) + (c11 - c10) * tx } else { 0.0 };
    let dz = if cell.inside[2] {
        let d0 = (v001 - v000) * (1.0 - ty) + (v011 - v010) * ty;
        let d1 = (v101 - v100) * (1.0 - ty) + (v111 - v110) * ty;
        d0 * (1.0 - tx) + d1 * tx
    } else {
        0.0
    };
    (value, [dx, dy, dz])
}

/// Value of `data` in a precomputed cell.
#[inline]
pub fn sample_value_in_cell(data: &[f64], shape: [usize; 3], cell: &TrilinearCell) -> f64 {
    let s1 = shape[2];
    let s0 = shape[1] * shape[2];
    let [tx, ty, tz] = cell.t;
    let c = |o: usize| data[cell.base + o];
    let c00 = c(0) + (c(1) - c(0)) * tz;
    let c01 = c(s1) + (c(s1 + 1) - c(s1)) * tz;
    let c10 = c(s0) + (c(s0 + 1) - c(s0)) * tz;
    let c11 = c(s0 + s1) + (c(s0 + s1 + 1) - c(s0 + s1)) * tz;
    let c0 = c00 + (c01 - c00) * ty;
    let c1 = c10 + (c11 - c10) * ty;
    c0 + (c1 - c0) * tx
}

/// Trilinear sample and its spatial gradient. Axes along which the point was
/// clamped have zero derivative.
#[inline]
pub fn sample_scalar_grad(data: &[f64], shape: [usize; 3], p: Vec3) -> (f64, Vec3) {
    sample_in_cell(data, shape, &trilinear_cell(shape, p))
}

/// The eight corner indices and weights used by a trilinear sample.
#[inline]
pub fn trilinear_weights(shape: [usize; 3], p: Vec3) -> ([usize; 8], [f64; 8]) {
    let (i0, tx, _) = cell(p[0], shape[0]);
    let (j0, ty, _) = cell(p[1], shape[1]);
    let (k0, tz, _) = cell(p[2], shape[2]);
    let s1 = shape[2];
    let s0 = shape[1] * shape[2];
    let base = i0 * s0 + j0 * s1 + k0;
    let mut idx = [0usize; 8];
    let mut w = [0.0; 8];
    let mut n = 0;
    for (di, wx) in [(0, 1.0 - tx), (1, tx)] {
        for (dj, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dk, wz) in [(0, 1.0 - tz), (1, tz)] {
                idx[n] = base + di * s0 + dj * s1 + dk;
                w[n] = wx * wy * wz;
                n += 1;
            }
        }
    }
    (idx, w)
}

#[inline]
pub fn sample_vector(data: &[Vec3], shape: [usize; 3], p: Vec3) -> Vec3 {
    let (idx, w) = trilinear_weights(shape, p);
    let mut out = [0.0; 3];
    for n in 0..8 {
        let v = data[idx[n]];
        out[0] += w[n] * v[0];
        out[1] += w[n] * v[1];
        out[2] += w[n] * v[2];
    }
    out
}

/// Value part of [`sample_vector_jacobian`], summed in the same order.
#[inline]
pub fn sample_vector_corners(data: &[Vec3], shape: [usize; 3], p: Vec3) -> Vec3 {
    let (i0, tx, _) = cell(p[0], shape[0]);
    let (j0, ty, _) = cell(p[1], shape[1]);
    let (k0, tz, _) = cell(p[2], shape[2]);
    let s1 = shape[2];
    let s0 = shape[1] * shape[2];
    let base = i0 * s0 + j0 * s1 + k0;
    let mut value = [0.0; 3];
    for (di, wx) in [(0, 1.0 - tx), (1, tx)] {
        for (dj, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dk, wz) in [(0, 1.0 - tz), (1, tz)] {
                let v = data[base + di * s0 + dj * s1 + dk];
                let w = wx * wy * wz;
                for c in 0..3 {
                    value[c] += w * v[c];
                }
            }
        }
    }
    value
}

/// Trilinear vector sample and its Jacobian `jac[c][a] = d u_c / d p_a`.
#[inline]
pub fn sample_vector_jacobian(data: &[Vec3], shape: [usize; 3], p: Vec3) -> (Vec3, [Vec3; 3]) {
    let (i0, tx, inx) = cell(p[0], shape[0]);
    let (j0, ty, iny) = cell(p[1], shape[1]);
    let (k0, tz, inz) = cell(p[2], shape[2]);
    let s1 = shape[2];
    let s0 = shape[1] * shape[2];
    let base = i0 * s0 + j0 * s1 + k0;
    let inside = [inx, iny, inz];
    let mut value = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for (di, wx, dwx) in [(0, 1.0 - tx, -1.0), (1, tx, 1.0)] {
        for (dj, wy, dwy) in [(0, 1.0 - ty, -1.0), (1, ty, 1.0)] {
            for (dk, wz, dwz) in [(0, 1.0 - tz, -1.0), (1, tz, 1.0)] {
                let v = data[base + di * s0 + dj * s1 + dk];
                let w = wx * wy * wz;
                let dw = [dwx * wy * wz, wx * dwy * wz, wx * wy * dwz];
                for c in 0..3 {
                    value[c] += w * v[c];
                    for a in 0..3 {
                        if inside[a] {
                            jac[c][a] += dw[a] * v[c];
                        }
                    }
                }
            }
        }
    }
    (value, jac)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius).map(|p| (-((p * p) as f64) / (2.0 * sigma * sigma)).exp()).collect()
}

/// One separable pass of a symmetric kernel along `axis`. With `renormalize`
/// the in-bounds taps are rescaled to sum to one; otherwise out-of-bounds taps
/// are simply dropped.
pub(crate) fn filter_axis(data: &[f64], shape: [usize; 3], axis: usize, kernel: &[f64], renormalize: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let n = shape[axis] as isize;
    let stride = match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    };
    let mut out = vec![0.0; data.len()];
    let [n0, n1, n2] = shape;
    let mut line_starts = Vec::with_capacity(data.len() / shape[axis]);
    for i in 0..n0 {
        for j in 0..n1 {
            for k in 0..n2 {
                let c = [i, j, k];
                if c[axis] == 0 {
                    line_starts.push((i * n1 + j) * n2 + k);
                }
            }
        }
    }
    let mut line = vec![0.0; shape[axis]];
    for start in line_starts {
        for (x, slot) in line.iter_mut().enumerate() {
            *slot = data[start + x * stride];
        }
        for x in 0..n {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            let lo = (-radius).max(-x);
            let hi = radius.min(n - 1 - x);
            for p in lo..=hi {
                let w = kernel[(p + radius) as usize];
                acc += w * line[(x + p) as usize];
                wsum += w;
            }
            out[start + x as usize * stride] = if renormalize { acc / wsum } else { acc };
        }
    }
    out
}

/// Separable Gaussian blur with radius `ceil(3 sigma)`; at the borders the
/// kernel is renormalised over the in-bounds taps.
pub fn gaussian_blur(vol: &ScalarVolume, sigma_voxels: f64) -> Result<ScalarVolume> {
    if !(sigma_voxels > 0.0) {
        return Err(Error::InvalidParameter(format!("blur sigma must be positive, got {sigma_voxels}")));
    }
    let kernel = gaussian_kernel(sigma_voxels);
    let shape = vol.geometry.shape;
    let mut data = vol.data.clone();
    for axis in 0..3 {
        data = filter_axis(&data, shape, axis, &kernel, true);
    }
    Ok(ScalarVolume { geometry: vol.geometry, data })
}

/// Blur with sigma 1 and keep every second voxel from index 0.
pub fn downsample_by_two(vol: &ScalarVolume) -> Result<ScalarVolume> {
    if vol.geometry.shape.iter().any(|&n| n < 8) {
        return Err(Error::TooSmall(format!(
            "downsampling needs at least 8 voxels per axis, got {:?}",
            vol.geometry.shape
        )));
    }
    let blurred = gaussian_blur(vol, 1.0)?;
    let target = vol.geometry.halved();
    let src = vol.geometry;
    Ok(ScalarVolume::from_fn(target, |i, j, k| blurred.data[src.index(2 * i, 2 * j, 2 * k)]))
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&sorted, q)
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

/// Foreground = intensity strictly above the given quantile, followed by one
/// 6-neighbourhood closing.
pub fn foreground_mask(vol: &ScalarVolume, q: f64) -> Result<MaskVolume> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile must lie in (0, 1), got {q}")));
    }
    if vol.is_constant() {
        return Err(Error::DegenerateIntensity);
    }
    let threshold = quantile(&vol.data, q);
    let raw = MaskVolume { geometry: vol.geometry, data: vol.data.iter().map(|&v| v > threshold).collect() };
    Ok(raw.close())
}

pub const DEFAULT_MASK_QUANTILE: f64 = 0.05;
