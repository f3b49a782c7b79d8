//! Dense deformation algebra: composition, fixed-point inversion, Jacobian
//! determinants, non-diffeomorphic volume and image warping, plus the
//! multi-stage stack of B-spline updates.
//!
//! Composition is written "first then second" acting on points:
//! `compose(u1, u2)` is the displacement of `x -> x + u1(x) + u2(x + u1(x))`.

use serde::{Deserialize, Serialize};

use crate::bspline::BSplineField;
use crate::error::{Error, Result};
use crate::volume::{sample_vector, LabelVolume, ScalarVolume, Vec3, VectorField};

pub const DEFAULT_INVERSION_TOL: f64 = 1e-6;
pub const DEFAULT_INVERSION_MAX_ITER: usize = 50;

#[inline]
fn point(i: usize, j: usize, k: usize) -> Vec3 {
    [i as f64, j as f64, k as f64]
}

#[inline]
fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn compose(first: &VectorField, second: &VectorField) -> Result<VectorField> {
    first.geometry.ensure_same(&second.geometry, "compose")?;
    let shape = first.geometry.shape;
    Ok(VectorField::from_fn(first.geometry, |i, j, k| {
        let u1 = first.at(i, j, k);
        let y = add(point(i, j, k), u1);
        add(u1, sample_vector(&second.data, shape, y))
    }))
}

/// Solve `v(x) = -u(x + v(x))` by fixed-point iteration from `v = -u`.
pub fn invert_fixed_point(u: &VectorField, tol: f64, max_iter: usize) -> Result<VectorField> {
    let shape = u.geometry.shape;
    let mut v: Vec<Vec3> = u.data.iter().map(|d| d.map(|x| -x)).collect();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        residual = 0.0;
        let next: Vec<Vec3> = v
            .iter()
            .enumerate()
            .map(|(idx, vi)| {
                let [i, j, k] = u.geometry.coords(idx);
                let s = sample_vector(&u.data, shape, add(point(i, j, k), *vi));
                [-s[0], -s[1], -s[2]]
            })
            .collect();
        for (a, b) in next.iter().zip(&v) {
            for c in 0..3 {
                residual = f64::max(residual, (a[c] - b[c]).abs());
            }
        }
        v = next;
        if residual < tol {
            return Ok(VectorField { geometry: u.geometry, data: v });
        }
    }
    Err(Error::InversionDiverged { residual, iterations: max_iter })
}

#[inline]
pub(crate) fn det3(m: &[Vec3; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix: `d det / d m[r][c] = cof[r][c]`.
#[inline]
pub(crate) fn cofactor3(m: &[Vec3; 3]) -> [Vec3; 3] {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

/// `I + grad u` at an interior voxel by central differences; `m[c][a] = d(x+u)_c / d x_a`.
#[inline]
pub(crate) fn central_jacobian(data: &[Vec3], shape: [usize; 3], idx: usize) -> [Vec3; 3] {
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut m = [[0.0; 3]; 3];
    for a in 0..3 {
        let hi = data[idx + strides[a]];
        let lo = data[idx - strides[a]];
        for c in 0..3 {
            m[c][a] = (hi[c] - lo[c]) / 2.0;
        }
    }
    for (c, row) in m.iter_mut().enumerate() {
        row[c] += 1.0;
    }
    m
}

/// `det(I + grad u)`: central differences inside, one-sided at the borders.
pub fn jacobian_determinant(u: &VectorField) -> ScalarVolume {
    let g = u.geometry;
    let shape = g.shape;
    ScalarVolume::from_fn(g, |i, j, k| {
        let p = [i, j, k];
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            let (lo, hi) = if p[a] == 0 {
                (0, 1)
            } else if p[a] == shape[a] - 1 {
                (p[a] - 1, p[a])
            } else {
                (p[a] - 1, p[a] + 1)
            };
            let mut plo = p;
            let mut phi = p;
            plo[a] = lo;
            phi[a] = hi;
            let (vlo, vhi) = (u.at(plo[0], plo[1], plo[2]), u.at(phi[0], phi[1], phi[2]));
            let h = (hi - lo) as f64;
            for c in 0..3 {
                m[c][a] = (vhi[c] - vlo[c]) / h;
            }
        }
        for (c, row) in m.iter_mut().enumerate() {
            row[c] += 1.0;
        }
        det3(&m)
    })
}

pub(crate) fn interior_indices(shape: [usize; 3]) -> impl Iterator<Item = usize> {
    let [n0, n1, n2] = shape;
    (1..n0 - 1).flat_map(move |i| (1..n1 - 1).flat_map(move |j| (1..n2 - 1).map(move |k| (i * n1 + j) * n2 + k)))
}

pub(crate) fn interior_count(shape: [usize; 3]) -> usize {
    shape.iter().map(|n| n.saturating_sub(2)).product()
}

/// Mean over interior voxels of `max(0, -det(I + grad u))`.
pub fn non_diffeomorphic_volume(u: &VectorField) -> f64 {
    let shape = u.geometry.shape;
    let n = interior_count(shape);
    if n == 0 {
        return 0.0;
    }
    let total: f64 = interior_indices(shape).map(|idx| (-det3(&central_jacobian(&u.data, shape, idx))).max(0.0)).sum();
    total / n as f64
}

/// `output(x) = img(x + u(x))`, trilinear with clamp-to-edge.
pub fn apply_warp(img: &ScalarVolume, u: &VectorField) -> Result<ScalarVolume> {
    img.geometry.ensure_same(&u.geometry, "apply_warp")?;
    let shape = img.geometry.shape;
    Ok(ScalarVolume::from_fn(img.geometry, |i, j, k| {
        crate::volume::sample_scalar(&img.data, shape, add(point(i, j, k), u.at(i, j, k)))
    }))
}

/// Nearest-neighbour label warp: `output(x) = labels(round(x + u(x)))`.
pub fn warp_labels(labels: &LabelVolume, u: &VectorField) -> Result<LabelVolume> {
    labels.geometry.ensure_same(&u.geometry, "warp_labels")?;
    let g = labels.geometry;
    let mut data = Vec::with_capacity(g.len());
    for (idx, d) in u.data.iter().enumerate() {
        let p = g.coords(idx);
        let q: [usize; 3] =
            std::array::from_fn(|a| (p[a] as f64 + d[a]).round().clamp(0.0, (g.shape[a] - 1) as f64) as usize);
        data.push(labels.data[g.index(q[0], q[1], q[2])]);
    }
    Ok(LabelVolume { geometry: g, data })
}

/// Ordered per-resolution update fields, coarsest first. The total forward
/// displacement applies stage 0 to points first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStack {
    pub stages: Vec<BSplineField>,
}

impl StageStack {
    pub fn new() -> Self {
        Self { stages: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn push(&mut self, stage: BSplineField) -> Result<()> {
        if let Some(first) = self.stages.first() {
            if first.image_geometry.shape != stage.image_geometry.shape {
                return Err(Error::GeometryMismatch("stages must share the image domain".into()));
            }
        }
        stage.check_bound()?;
        self.stages.push(stage);
        Ok(())
    }
}

impl Default for StageStack {
    fn default() -> Self {
        Self::new()
    }
}

/// Left fold of `compose` over the dense stages, coarsest first.
pub fn stack_to_dense(stack: &StageStack) -> Result<VectorField> {
    let mut iter = stack.stages.iter();
    let first = iter.next().ok_or_else(|| Error::StructureMismatch("empty stage stack".into()))?;
    iter.try_fold(first.to_dense(), |acc, s| compose(&acc, &s.to_dense()))
}

/// Dense per-stage inverses in the order they act on points (finest first).
pub fn stack_inverses(stack: &StageStack) -> Result<Vec<VectorField>> {
    let mut out = Vec::with_capacity(stack.len());
    for stage in stack.stages.iter().rev() {
        out.push(invert_fixed_point(&stage.to_dense(), DEFAULT_INVERSION_TOL, DEFAULT_INVERSION_MAX_ITER)?);
    }
    Ok(out)
}

/// Left fold of `compose` over fields listed in application order.
pub fn compose_all(fields: &[VectorField]) -> Result<VectorField> {
    let (first, rest) = fields.split_first().ok_or_else(|| Error::StructureMismatch("nothing to compose".into()))?;
    rest.iter().try_fold(first.clone(), |acc, f| compose(&acc, f))
}

/// Newton refinement of an approximate inverse: solves `x + v(x) + u(x + v(x)) = x`
/// at every grid point, using the Jacobian of the trilinear interpolant of `u`.
pub fn refine_inverse(u: &VectorField, initial: &VectorField, tol: f64, max_iter: usize) -> Result<VectorField> {
    u.geometry.ensure_same(&initial.geometry, "refine_inverse")?;
    let shape = u.geometry.shape;
    let mut data = initial.data.clone();
    let mut worst: f64 = 0.0;
    for (idx, v) in data.iter_mut().enumerate() {
        let [i, j, k] = u.geometry.coords(idx);
        let x = point(i, j, k);
        let mut residual = f64::INFINITY;
        for _ in 0..max_iter {
            let y = add(x, *v);
            let (s, jac) = crate::volume::sample_vector_jacobian(&u.data, shape, y);
            let r = add(*v, s);
            residual = r.iter().fold(0.0, |m: f64, c| m.max(c.abs()));
            if residual < tol {
                break;
            }
            let mut m = jac;
            for (c, row) in m.iter_mut().enumerate() {
                row[c] += 1.0;
            }
            let step = solve3(&m, r).unwrap_or(r);
            for c in 0..3 {
                v[c] -= step[c];
            }
        }
        worst = worst.max(residual);
    }
    if worst >= tol {
        return Err(Error::InversionDiverged { residual: worst, iterations: max_iter });
    }
    Ok(VectorField { geometry: u.geometry, data })
}

/// Solve `m x = r` by Cramer's rule; `None` when `m` is singular.
#[inline]
pub(crate) fn solve3(m: &[Vec3; 3], r: Vec3) -> Option<Vec3> {
    let det = det3(m);
    if det.abs() < 1e-300 {
        return None;
    }
    let cof = cofactor3(m);
    // inverse = cof^T / det
    Some(std::array::from_fn(|a| (cof[0][a] * r[0] + cof[1][a] * r[1] + cof[2][a] * r[2]) / det))
}

/// Dense backward field of a stack: per-stage inverses composed finest first,
/// then refined so that it inverts `stack_to_dense(stack)` at every grid point.
pub fn stack_inverse_dense(stack: &StageStack) -> Result<VectorField> {
    let forward = stack_to_dense(stack)?;
    let initial = compose_all(&stack_inverses(stack)?)?;
    refine_inverse(&forward, &initial, 1e-9, 30)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridGeometry;
    use rand::{Rng, SeedableRng};

    fn geom(n: usize) -> GridGeometry {
        GridGeometry::with_shape([n, n, n]).unwrap()
    }

    fn random_stage(n: usize, spacing: usize, scale: f64, seed: u64) -> BSplineField {
        let z = BSplineField::zeros(geom(n), spacing).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = z.bound * scale;
        let c = (0..z.control_count()).map(|_| [0; 3].map(|_| rng.random_range(-b..=b))).collect();
        z.with_coefficients(c).unwrap()
    }

    fn interior_max_diff(a: &VectorField, b: &VectorField, margin: usize) -> f64 {
        let g = a.geometry;
        let mut m: f64 = 0.0;
        for (idx, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
            let p = g.coords(idx);
            if (0..3).all(|ax| p[ax] >= margin && p[ax] + margin < g.shape[ax]) {
                for c in 0..3 {
                    m = m.max((x[c] - y[c]).abs());
                }
            }
        }
        m
    }

    #[test]
    fn compose_identity_and_translations() {
        let u = random_stage(10, 3, 0.8, 1).to_dense();
        let z = VectorField::zeros(u.geometry);
        assert_eq!(compose(&z, &u).unwrap(), u);
        assert_eq!(compose(&u, &z).unwrap(), u);
        let t1 = VectorField::constant(u.geometry, [1.0, 0.5, -0.25]);
        let t2 = VectorField::constant(u.geometry, [-0.5, 1.0, 2.0]);
        let c = compose(&t1, &t2).unwrap();
        assert!(interior_max_diff(&c, &VectorField::constant(u.geometry, [0.5, 1.5, 1.75]), 3) < 1e-12);
        let other = VectorField::zeros(geom(8));
        assert!(compose(&u, &other).is_err());
    }

    #[test]
    fn compose_matches_pointwise_oracle() {
        let u1 = random_stage(9, 3, 1.0, 2).to_dense();
        let u2 = random_stage(9, 3, 1.0, 3).to_dense();
        let c = compose(&u1, &u2).unwrap();
        let g = u1.geometry;
        for idx in (0..g.len()).step_by(7) {
            let [i, j, k] = g.coords(idx);
            let a = u1.at(i, j, k);
            let y = [i as f64 + a[0], j as f64 + a[1], k as f64 + a[2]];
            let s = u2.sample(y);
            for ax in 0..3 {
                assert!((c.data[idx][ax] - (a[ax] + s[ax])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_is_nearly_associative() {
        let g = geom(24);
        let fields: Vec<VectorField> = (0..3).map(|s| random_stage(24, 8, 0.25, 10 + s).to_dense()).collect();
        assert_eq!(fields[0].geometry, g);
        let left = compose(&compose(&fields[0], &fields[1]).unwrap(), &fields[2]).unwrap();
        let right = compose(&fields[0], &compose(&fields[1], &fields[2]).unwrap()).unwrap();
        assert!(interior_max_diff(&left, &right, 0) < 0.01);
    }

    #[test]
    fn invert_zero_translation_and_random() {
        let g = geom(12);
        let z = VectorField::zeros(g);
        assert_eq!(invert_fixed_point(&z, 1e-6, 50).unwrap(), z);
        let t = VectorField::constant(g, [1.0, -2.0, 0.5]);
        let inv = invert_fixed_point(&t, 1e-6, 50).unwrap();
        assert!(interior_max_diff(&inv, &VectorField::constant(g, [-1.0, 2.0, -0.5]), 3) < 1e-9);

        let u = random_stage(32, 4, 1.0, 5).to_dense();
        let v = invert_fixed_point(&u, 1e-6, 50).unwrap();
        // (id + u) o (id + v) is the identity up to the iteration tolerance
        let round = compose(&v, &u).unwrap();
        assert!(round.max_norm() < 0.05, "{}", round.max_norm());
    }

    #[test]
    fn inversion_reports_divergence() {
        let g = geom(8);
        // white noise of several voxels is far from contractive
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let u = VectorField::new(g, (0..g.len()).map(|_| [0; 3].map(|_| rng.random_range(-3.0..3.0))).collect())
            .unwrap();
        assert!(matches!(invert_fixed_point(&u, 1e-6, 50), Err(Error::InversionDiverged { .. })));
    }

    #[test]
    fn determinant_identity_scaling_and_oracle() {
        let g = geom(9);
        assert!(jacobian_determinant(&VectorField::zeros(g)).data.iter().all(|&d| d == 1.0));
        let scale = VectorField::from_fn(g, |i, j, k| [i, j, k].map(|c| 0.1 * (c as f64 - 4.0)));
        let det = jacobian_determinant(&scale);
        // a linear map is differentiated exactly, including one-sided borders
        assert!(det.data.iter().all(|&d| (d - 1.331).abs() < 1e-12));

        let u = random_stage(9, 3, 0.7, 8).to_dense();
        let det = jacobian_determinant(&u);
        for idx in interior_indices(g.shape) {
            let [i, j, k] = g.coords(idx);
            let d = |a: usize, c: usize| {
                let mut hi = [i, j, k];
                let mut lo = [i, j, k];
                hi[a] += 1;
                lo[a] -= 1;
                (u.at(hi[0], hi[1], hi[2])[c] - u.at(lo[0], lo[1], lo[2])[c]) / 2.0
            };
            let (a, b, c) = (1.0 + d(0, 0), d(1, 0), d(2, 0));
            let (e, f, h) = (d(0, 1), 1.0 + d(1, 1), d(2, 1));
            let (p, q, r) = (d(0, 2), d(1, 2), 1.0 + d(2, 2));
            let expect = a * (f * r - h * q) - b * (e * r - h * p) + c * (e * q - f * p);
            assert!((det.data[idx] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn solve3_inverts() {
        let m = [[2.0, 0.5, 0.1], [0.3, 1.5, -0.2], [0.0, 0.4, 1.0]];
        let x = solve3(&m, [1.0, 2.0, 3.0]).unwrap();
        for r in 0..3 {
            let back: f64 = (0..3).map(|c| m[r][c] * x[c]).sum();
            assert!((back - [1.0, 2.0, 3.0][r]).abs() < 1e-12);
        }
    }

    #[test]
    fn cofactor_is_determinant_gradient() {
        let m = [[1.1, 0.2, -0.3], [0.05, 0.9, 0.4], [-0.2, 0.1, 1.3]];
        let cof = cofactor3(&m);
        for r in 0..3 {
            for c in 0..3 {
                let mut hi = m;
                let mut lo = m;
                hi[r][c] += 1e-6;
                lo[r][c] -= 1e-6;
                let fd = (det3(&hi) - det3(&lo)) / 2e-6;
                assert!((fd - cof[r][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ndv_zero_and_single_fold() {
        let g = geom(7);
        assert_eq!(non_diffeomorphic_volume(&VectorField::zeros(g)), 0.0);
        let smooth = VectorField::from_fn(g, |i, j, _| [0.05 * j as f64, 0.02 * i as f64, 0.0]);
        assert_eq!(non_diffeomorphic_volume(&smooth), 0.0);

        // Opposite kicks on both axis-0 neighbours of (3,3,3) give det = -0.5 there only.
        let mut single = VectorField::zeros(g);
        single.data[g.index(4, 3, 3)] = [-1.5, 0.0, 0.0];
        single.data[g.index(2, 3, 3)] = [1.5, 0.0, 0.0];
        let det = jacobian_determinant(&single);
        assert!((det.at(3, 3, 3) + 0.5).abs() < 1e-12);
        let interior = interior_count(g.shape);
        assert_eq!(interior_indices(g.shape).filter(|&i| det.data[i] <= 0.0).count(), 1);
        assert!((non_diffeomorphic_volume(&single) - 0.5 / interior as f64).abs() < 1e-15);
    }

    #[test]
    fn bounded_fields_do_not_fold() {
        for seed in 0..20 {
            let u = random_stage(20, 4, 1.0, 100 + seed).to_dense();
            assert_eq!(non_diffeomorphic_volume(&u), 0.0);
        }
    }

    #[test]
    fn warp_identity_translation_and_oracle() {
        let g = geom(10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let img = ScalarVolume { geometry: g, data: (0..g.len()).map(|_| rng.random::<f64>()).collect() };
        assert_eq!(apply_warp(&img, &VectorField::zeros(g)).unwrap(), img);
        let t = VectorField::constant(g, [2.0, 0.0, -1.0]);
        let w = apply_warp(&img, &t).unwrap();
        assert_eq!(w.at(3, 4, 5), img.at(5, 4, 4));
        let u = random_stage(10, 3, 1.0, 6).to_dense();
        let w = apply_warp(&img, &u).unwrap();
        for idx in (0..g.len()).step_by(5) {
            let [i, j, k] = g.coords(idx);
            let d = u.data[idx];
            let s = img.trilinear_sample(&[[i as f64 + d[0], j as f64 + d[1], k as f64 + d[2]]]).unwrap()[0];
            assert_eq!(w.data[idx], s);
        }
    }

    #[test]
    fn label_warp_identity() {
        let g = geom(6);
        let labels = LabelVolume { geometry: g, data: (0..g.len()).map(|i| (i % 4) as u16).collect() };
        assert_eq!(warp_labels(&labels, &VectorField::zeros(g)).unwrap(), labels);
    }

    #[test]
    fn stack_dense_cases() {
        let g = geom(12);
        assert!(stack_to_dense(&StageStack::new()).is_err());
        let s = random_stage(12, 4, 0.5, 1);
        let mut stack = StageStack::new();
        stack.push(s.clone()).unwrap();
        assert_eq!(stack_to_dense(&stack).unwrap(), s.to_dense());

        let zero = BSplineField::zeros(g, 4).unwrap();
        let t1 = zero.with_coefficients(vec![[0.5, 0.0, 1.0]; zero.control_count()]).unwrap();
        let t2 = zero.with_coefficients(vec![[1.0, -0.5, 0.0]; zero.control_count()]).unwrap();
        let stack = StageStack { stages: vec![t1, t2] };
        let d = stack_to_dense(&stack).unwrap();
        assert!(interior_max_diff(&d, &VectorField::constant(g, [1.5, -0.5, 1.0]), 2) < 1e-12);

        let stages: Vec<BSplineField> = (0..3).map(|i| random_stage(12, 4 - i, 0.6, 20 + i as u64)).collect();
        let stack = StageStack { stages: stages.clone() };
        let dense = stack_to_dense(&stack).unwrap();
        let oracle = compose(&compose(&stages[0].to_dense(), &stages[1].to_dense()).unwrap(), &stages[2].to_dense()).unwrap();
        assert_eq!(dense, oracle);
    }

    #[test]
    fn stack_inverse_consistency() {
        let stages: Vec<BSplineField> = [8usize, 4, 2]
            .iter()
            .enumerate()
            .map(|(n, &s)| random_stage(32, s, 1.0, 40 + n as u64))
            .collect();
        let stack = StageStack { stages };
        let fwd = stack_to_dense(&stack).unwrap();
        let bwd = stack_inverse_dense(&stack).unwrap();
        let residual = compose(&bwd, &fwd).unwrap().max_norm();
        assert!(residual < 0.05, "{residual}");
    }
}
