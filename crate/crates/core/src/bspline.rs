//! Magnitude-constrained cubic B-spline displacement fields.
//!
//! Control point `c` along an axis sits at voxel position `(c - 1) * spacing`,
//! so the control grid covers the image with one extra point of margin on
//! every side. Coefficients are displacements in voxels, each component
//! bounded by `INVERTIBILITY_FACTOR * spacing`, which keeps every field
//! injective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, Vec3, VectorField};

/// Per-axis coefficient bound as a fraction of the control spacing.
pub const INVERTIBILITY_FACTOR: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineField {
    pub image_geometry: GridGeometry,
    pub control_spacing: usize,
    pub control_shape: [usize; 3],
    pub bound: f64,
    pub coefficients: Vec<Vec3>,
}

/// Basis support of a point: first control index per axis, the four weights
/// per axis and their derivatives with respect to the voxel coordinate.
#[derive(Clone, Copy, Debug)]
pub struct BasisSupport {
    pub start: [usize; 3],
    pub weights: [[f64; 4]; 3],
    pub derivs: [[f64; 4]; 3],
}

#[inline]
fn cubic_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0, (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0]
}

#[inline]
fn cubic_derivs(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let v = 1.0 - u;
    [-0.5 * v * v, 1.5 * u2 - 2.0 * u, -1.5 * u2 + u + 0.5, 0.5 * u2]
}

/// Cubic B-spline kernel `beta3(t)`.
pub fn cubic_bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

pub fn control_shape_for(shape: [usize; 3], spacing: usize) -> [usize; 3] {
    shape.map(|n| (n - 1) / spacing + 4)
}

impl BSplineField {
    pub fn zeros(image_geometry: GridGeometry, control_spacing: usize) -> Result<Self> {
        if control_spacing == 0 {
            return Err(Error::InvalidParameter("control spacing must be positive".into()));
        }
        let control_shape = control_shape_for(image_geometry.shape, control_spacing);
        Ok(Self {
            image_geometry,
            control_spacing,
            control_shape,
            bound: INVERTIBILITY_FACTOR * control_spacing as f64,
            coefficients: vec![[0.0; 3]; control_shape.iter().product()],
        })
    }

    pub fn control_count(&self) -> usize {
        self.coefficients.len()
    }

    #[inline]
    pub fn control_index(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.control_shape[1] + b) * self.control_shape[2] + c
    }

    /// Map unconstrained values through `bound * tanh(raw / bound)`.
    pub fn clamp_coefficients(&self, raw: &[Vec3]) -> Result<BSplineField> {
        if raw.len() != self.coefficients.len() {
            return Err(Error::StructureMismatch(format!(
                "expected {} raw coefficients, got {}",
                self.coefficients.len(),
                raw.len()
            )));
        }
        let b = self.bound;
        let coefficients = raw.iter().map(|r| r.map(|x| b * (x / b).tanh())).collect();
        Ok(BSplineField { coefficients, ..self.clone() })
    }

    /// Replace coefficients that are already constrained; rejects out-of-bound values.
    pub fn with_coefficients(&self, coefficients: Vec<Vec3>) -> Result<BSplineField> {
        if coefficients.len() != self.coefficients.len() {
            return Err(Error::StructureMismatch("coefficient count mismatch".into()));
        }
        let field = BSplineField { coefficients, ..self.clone() };
        field.check_bound()?;
        Ok(field)
    }

    pub fn check_bound(&self) -> Result<()> {
        if self.coefficients.iter().flatten().any(|c| !(c.abs() <= self.bound)) {
            return Err(Error::InvalidParameter(format!("coefficient exceeds bound {}", self.bound)));
        }
        Ok(())
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.coefficients.iter().flatten().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// First supporting control index per axis, as chosen by [`Self::support`].
    #[inline]
    pub fn support_start(&self, p: Vec3) -> [usize; 3] {
        let s = self.control_spacing as f64;
        std::array::from_fn(|a| (p[a].clamp(0.0, (self.image_geometry.shape[a] - 1) as f64) / s) as usize)
    }

    /// Basis support at a point given in image voxel coordinates. The point is
    /// clamped to the image domain; clamped axes get zero derivative weights.
    #[inline]
    pub fn support(&self, p: Vec3) -> BasisSupport {
        let s = self.control_spacing as f64;
        let mut start = [0usize; 3];
        let mut weights = [[0.0; 4]; 3];
        let mut derivs = [[0.0; 4]; 3];
        for a in 0..3 {
            let hi = (self.image_geometry.shape[a] - 1) as f64;
            let inside = (0.0..=hi).contains(&p[a]);
            let x = p[a].clamp(0.0, hi);
            let t = x / s;
            // control index of the first supporting point is base - 1 + 1
            start[a] = t as usize;
            let u = t - start[a] as f64;
            weights[a] = cubic_weights(u);
            if inside {
                derivs[a] = cubic_derivs(u).map(|d| d / s);
            }
        }
        BasisSupport { start, weights, derivs }
    }

    #[inline]
    pub fn eval_support(&self, sup: &BasisSupport) -> Vec3 {
        let mut out = [0.0; 3];
        for a in 0..4 {
            let wa = sup.weights[0][a];
            for b in 0..4 {
                let wab = wa * sup.weights[1][b];
                let row = self.control_index(sup.start[0] + a, sup.start[1] + b, sup.start[2]);
                let coefs: &[Vec3; 4] = self.coefficients[row..row + 4].try_into().expect("support row");
                for (c, coef) in coefs.iter().enumerate() {
                    let w = wab * sup.weights[2][c];
                    out[0] += w * coef[0];
                    out[1] += w * coef[1];
                    out[2] += w * coef[2];
                }
            }
        }
        out
    }

    #[inline]
    pub fn eval(&self, p: Vec3) -> Vec3 {
        self.eval_support(&self.support(p))
    }

    /// Displacement and Jacobian `jac[c][a] = d u_c / d p_a` at a point.
    pub fn eval_with_jacobian(&self, p: Vec3) -> (Vec3, [Vec3; 3]) {
        let sup = self.support(p);
        let mut val = [0.0; 3];
        let mut jac = [[0.0; 3]; 3];
        for a in 0..4 {
            let (w0, d0) = (sup.weights[0][a], sup.derivs[0][a]);
            for b in 0..4 {
                let (w1, d1) = (sup.weights[1][b], sup.derivs[1][b]);
                let row = self.control_index(sup.start[0] + a, sup.start[1] + b, sup.start[2]);
                // contract the last axis first
                let mut s = [0.0; 3];
                let mut ds = [0.0; 3];
                let coefs: &[Vec3; 4] = self.coefficients[row..row + 4].try_into().expect("support row");
                for (c, coef) in coefs.iter().enumerate() {
                    let (w2, d2) = (sup.weights[2][c], sup.derivs[2][c]);
                    for k in 0..3 {
                        s[k] += w2 * coef[k];
                        ds[k] += d2 * coef[k];
                    }
                }
                for k in 0..3 {
                    val[k] += w0 * w1 * s[k];
                    jac[k][0] += d0 * w1 * s[k];
                    jac[k][1] += w0 * d1 * s[k];
                    jac[k][2] += w0 * w1 * ds[k];
                }
            }
        }
        (val, jac)
    }

    /// Accumulate `g * basis_weight` into a coefficient-shaped gradient buffer.
    #[inline]
    pub fn scatter(&self, sup: &BasisSupport, g: Vec3, out: &mut [Vec3]) {
        for a in 0..4 {
            let wa = sup.weights[0][a];
            for b in 0..4 {
                let wab = wa * sup.weights[1][b];
                let row = self.control_index(sup.start[0] + a, sup.start[1] + b, sup.start[2]);
                for c in 0..4 {
                    let w = wab * sup.weights[2][c];
                    let slot = &mut out[row + c];
                    slot[0] += w * g[0];
                    slot[1] += w * g[1];
                    slot[2] += w * g[2];
                }
            }
        }
    }

    /// Dense displacement on the full image grid.
    pub fn to_dense(&self) -> VectorField {
        VectorField::from_fn(self.image_geometry, |i, j, k| self.eval([i as f64, j as f64, k as f64]))
    }

    /// Dense displacement at the grid points `factor * (i, j, k)` of a decimated grid.
    pub fn to_dense_strided(&self, factor: usize, target: GridGeometry) -> VectorField {
        let f = factor as f64;
        VectorField::from_fn(target, |i, j, k| self.eval([f * i as f64, f * j as f64, f * k as f64]))
    }

    /// Elementwise running mean of constrained coefficients, in member order.
    pub fn average(fields: &[&BSplineField]) -> Result<BSplineField> {
        let first = fields.first().ok_or_else(|| Error::StructureMismatch("nothing to average".into()))?;
        for f in &fields[1..] {
            if f.control_spacing != first.control_spacing
                || f.control_shape != first.control_shape
                || f.image_geometry.shape != first.image_geometry.shape
            {
                return Err(Error::StructureMismatch("stage structures differ".into()));
            }
        }
        let mut coefficients = first.coefficients.clone();
        for (n, f) in fields.iter().enumerate().skip(1) {
            let w = 1.0 / (n + 1) as f64;
            for (acc, c) in coefficients.iter_mut().zip(&f.coefficients) {
                for k in 0..3 {
                    acc[k] += (c[k] - acc[k]) * w;
                }
            }
        }
        Ok(BSplineField { coefficients, ..(*first).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn geom(n: usize) -> GridGeometry {
        GridGeometry::with_shape([n, n, n]).unwrap()
    }

    fn random_field(n: usize, spacing: usize, seed: u64) -> BSplineField {
        let z = BSplineField::zeros(geom(n), spacing).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = z.bound;
        let coefficients = (0..z.control_count()).map(|_| [0; 3].map(|_| rng.random_range(-b..=b))).collect();
        z.with_coefficients(coefficients).unwrap()
    }

    #[test]
    fn weights_match_kernel_and_sum_to_one() {
        for u in [0.0, 0.2, 0.5, 0.9] {
            let w = cubic_weights(u);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for (n, &wn) in w.iter().enumerate() {
                assert!((wn - cubic_bspline(u + 1.0 - n as f64)).abs() < 1e-15);
            }
            let d = cubic_derivs(u);
            assert!(d.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn zero_and_constant_fields() {
        let z = BSplineField::zeros(geom(12), 4).unwrap();
        assert!(z.to_dense().data.iter().all(|v| *v == [0.0; 3]));
        let t = [0.5, -1.0, 1.2];
        let c = z.with_coefficients(vec![t; z.control_count()]).unwrap();
        for v in c.to_dense().data {
            for a in 0..3 {
                assert!((v[a] - t[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_control_point_matches_kernel() {
        let z = BSplineField::zeros(geom(10), 3).unwrap();
        let mut coefs = vec![[0.0; 3]; z.control_count()];
        let ctrl = [2usize, 3, 1];
        coefs[z.control_index(ctrl[0], ctrl[1], ctrl[2])] = [1.0, 0.0, -0.5];
        let f = z.with_coefficients(coefs).unwrap();
        let dense = f.to_dense();
        for idx in 0..dense.data.len() {
            let x = dense.geometry.coords(idx);
            let w: f64 = (0..3)
                .map(|a| cubic_bspline((x[a] as f64 - (ctrl[a] as f64 - 1.0) * 3.0) / 3.0))
                .product();
            assert!((dense.data[idx][0] - w).abs() < 1e-12);
            assert!((dense.data[idx][2] + 0.5 * w).abs() < 1e-12);
        }
    }

    #[test]
    fn clamping_formula() {
        let z = BSplineField::zeros(geom(8), 5).unwrap();
        let b = z.bound;
        assert_eq!(b, 2.0);
        let mut raw = vec![[0.0; 3]; z.control_count()];
        raw[0] = [b, 1e6, -1e6];
        let f = z.clamp_coefficients(&raw).unwrap();
        assert!((f.coefficients[0][0] - b * 1f64.tanh()).abs() < 1e-15);
        assert!((f.coefficients[0][0] / b - 0.761594).abs() < 1e-6);
        assert!(f.coefficients[0][1] <= b && f.coefficients[0][2] >= -b);
        assert_eq!(f.coefficients[1], [0.0; 3]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let f = random_field(12, 4, 9);
        let p = [4.3, 6.1, 2.7];
        let (_, jac) = f.eval_with_jacobian(p);
        for a in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[a] += 1e-5;
            lo[a] -= 1e-5;
            let (vh, vl) = (f.eval(hi), f.eval(lo));
            for c in 0..3 {
                let fd = (vh[c] - vl[c]) / 2e-5;
                assert!((fd - jac[c][a]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn averaging_respects_bound_and_linearity() {
        let a = random_field(10, 4, 1);
        let neg = a.with_coefficients(a.coefficients.iter().map(|c| c.map(|x| -x)).collect()).unwrap();
        let avg = BSplineField::average(&[&a, &neg]).unwrap();
        assert!(avg.coefficients.iter().flatten().all(|&x| x == 0.0));
        let b = random_field(10, 4, 2);
        let avg = BSplineField::average(&[&a, &b, &a]).unwrap();
        avg.check_bound().unwrap();
        let other = random_field(10, 2, 3);
        assert!(BSplineField::average(&[&a, &other]).is_err());
    }
}
