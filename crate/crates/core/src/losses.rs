//! Objective terms and their gradients with respect to voxel values:
//! local normalised cross-correlation, diffusion regularisation, the
//! non-diffeomorphic volume penalty and cycle (group) consistency.

use serde::{Deserialize, Serialize};

use crate::deformation::{central_jacobian, cofactor3, det3, interior_count, interior_indices};
use crate::error::{Error, Result};
use crate::mind::MindVolume;
use crate::volume::{sample_vector_jacobian, trilinear_weights, MaskVolume, ScalarVolume, Vec3, VectorField};

pub const DEFAULT_WINDOW_RADIUS: usize = 4;
pub const LNCC_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub similarity: f64,
    pub diffusion: f64,
    pub ndv: f64,
    pub group_consistency: f64,
    pub intermediate_stage_factor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { similarity: 1.0, diffusion: 1.0, ndv: 0.0, group_consistency: 0.0, intermediate_stage_factor: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.similarity, self.diffusion, self.ndv, self.group_consistency, self.intermediate_stage_factor];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("loss weights must be finite and nonnegative".into()));
        }
        if self.intermediate_stage_factor > 1.0 {
            return Err(Error::InvalidParameter("intermediate stage factor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Unweighted terms for one registration direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionTerms {
    /// Similarity (higher is better); the loss uses its negation.
    pub similarity: f64,
    pub diffusion: f64,
    pub ndv: f64,
}

/// One evaluation of the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub level: usize,
    pub iteration: usize,
    pub total: f64,
    pub weights: LossWeights,
    pub forward: DirectionTerms,
    pub backward: DirectionTerms,
    pub group_consistency: f64,
    /// Weighted loss of each stage evaluated so far, coarsest first; the last
    /// entry is the stage being optimised.
    pub stage_losses: Vec<f64>,
}

impl LossReport {
    /// Weighted loss of the current stage alone.
    pub fn stage_loss(&self) -> f64 {
        let w = &self.weights;
        -w.similarity * (self.forward.similarity + self.backward.similarity)
            + w.diffusion * (self.forward.diffusion + self.backward.diffusion)
            + w.ndv * (self.forward.ndv + self.backward.ndv)
            + w.group_consistency * self.group_consistency
    }

    /// Current stage loss plus the down-weighted losses of earlier stages.
    pub fn weighted_total(&self) -> f64 {
        let earlier: f64 = self.stage_losses.iter().rev().skip(1).sum();
        self.stage_loss() + self.weights.intermediate_stage_factor * earlier
    }

    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("loss report serialises")
    }
}

/// Sum over the truncated `(2r+1)^3` window around each voxel.
#[cfg(test)]
pub(crate) fn box_sum(data: &[f64], shape: [usize; 3], r: usize) -> Vec<f64> {
    let mut out: Vec<[f64; 1]> = data.iter().map(|&v| [v]).collect();
    box_sum_lanes(&mut out, shape, r);
    out.into_iter().map(|[v]| v).collect()
}

/// [`box_sum`] applied independently to each of `K` interleaved lanes.
pub(crate) fn box_sum_lanes<const K: usize>(data: &mut [[f64; K]], shape: [usize; 3], r: usize) {
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut prefix: Vec<[f64; K]> = Vec::new();
    for axis in 0..3 {
        let n = shape[axis];
        let inner = strides[axis];
        let block = n * inner;
        // window of row x covers prefix rows lo..hi
        let bounds: Vec<(usize, usize)> = (0..n).map(|x| (x.saturating_sub(r), (x + r).min(n - 1) + 1)).collect();
        // prefix row x holds the sum of the first x rows of the block
        prefix.clear();
        prefix.resize((n + 1) * inner, [0.0; K]);
        for chunk in data.chunks_exact_mut(block) {
            if inner == 1 {
                for x in 0..n {
                    let (q, v) = (prefix[x], chunk[x]);
                    prefix[x + 1] = std::array::from_fn(|k| q[k] + v[k]);
                }
                for (o, &(lo, hi)) in chunk.iter_mut().zip(&bounds) {
                    let (h, l) = (prefix[hi], prefix[lo]);
                    *o = std::array::from_fn(|k| h[k] - l[k]);
                }
                continue;
            }
            for x in 0..n {
                let (done, rest) = prefix.split_at_mut((x + 1) * inner);
                let prev = &done[x * inner..];
                let row = &chunk[x * inner..(x + 1) * inner];
                for ((p, q), v) in rest[..inner].iter_mut().zip(prev).zip(row) {
                    for k in 0..K {
                        p[k] = q[k] + v[k];
                    }
                }
            }
            for (x, &(lo, hi)) in bounds.iter().enumerate() {
                let out = &mut chunk[x * inner..(x + 1) * inner];
                let (lo, hi) = (lo * inner, hi * inner);
                for ((o, h), l) in out.iter_mut().zip(&prefix[hi..hi + inner]).zip(&prefix[lo..lo + inner]) {
                    for k in 0..K {
                        o[k] = h[k] - l[k];
                    }
                }
            }
        }
    }
}

fn window_counts(shape: [usize; 3], r: usize) -> Vec<f64> {
    let per_axis: Vec<Vec<f64>> = shape
        .iter()
        .map(|&n| (0..n).map(|x| ((x + r).min(n - 1) - x.saturating_sub(r) + 1) as f64).collect())
        .collect();
    let mut out = Vec::with_capacity(shape.iter().product());
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                out.push(per_axis[0][i] * per_axis[1][j] * per_axis[2][k]);
            }
        }
    }
    out
}

/// Precomputed reciprocal window counts and mask for a grid.
#[derive(Clone, Debug)]
pub struct LnccContext {
    pub shape: [usize; 3],
    pub radius: usize,
    pub mask: Vec<bool>,
    inv_counts: Vec<f64>,
    masked: usize,
}

impl LnccContext {
    pub fn new(mask: &MaskVolume, radius: usize) -> Result<Self> {
        let masked = mask.count();
        if masked == 0 {
            return Err(Error::EmptyMask);
        }
        let shape = mask.geometry.shape;
        let inv_counts = window_counts(shape, radius).iter().map(|c| 1.0 / c).collect();
        Ok(Self { shape, radius, mask: mask.data.clone(), inv_counts, masked })
    }

    /// Window mean and floored variance of an image that stays fixed across
    /// evaluations.
    pub fn target(&self, b: &[f64]) -> LnccTarget {
        let (shape, r) = (self.shape, self.radius);
        let mut sums: Vec<[f64; 2]> = b.iter().map(|&x| [x, x * x]).collect();
        box_sum_lanes(&mut sums, shape, r);
        let stats = sums
            .iter()
            .zip(&self.inv_counts)
            .map(|([sb, sbb], ic)| {
                let mb = sb * ic;
                [mb, (sbb * ic - mb * mb).max(LNCC_VARIANCE_FLOOR)]
            })
            .collect();
        LnccTarget { data: b.to_vec(), stats }
    }

    /// Mean windowed correlation of `a` and `b` over the mask and, on request,
    /// its gradient with respect to every voxel of `a`.
    pub fn evaluate(&self, a: &[f64], b: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        self.evaluate_against(a, &self.target(b), want_grad)
    }

    pub fn evaluate_against(&self, a: &[f64], target: &LnccTarget, want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let (shape, r) = (self.shape, self.radius);
        let b = &target.data;
        let mut sums: Vec<[f64; 3]> = a.iter().zip(b).map(|(&x, &y)| [x, x * x, x * y]).collect();
        box_sum_lanes(&mut sums, shape, r);
        let n = a.len();
        let mut total = 0.0;
        let mut coef = if want_grad { vec![[0.0; 3]; n] } else { Vec::new() };
        for v in 0..n {
            if !self.mask[v] {
                continue;
            }
            let ic = self.inv_counts[v];
            let [sa, saa, sab] = sums[v];
            let [mb, fb] = target.stats[v];
            let ma = sa * ic;
            let va = saa * ic - ma * ma;
            let cov = sab * ic - ma * mb;
            let fa = va.max(LNCC_VARIANCE_FLOOR);
            let inv_denom = 1.0 / (fa * fb).sqrt();
            let ncc = cov * inv_denom;
            total += ncc;
            if want_grad {
                let al = ic * inv_denom;
                let be = if va > LNCC_VARIANCE_FLOOR { -ncc * ic / fa } else { 0.0 };
                coef[v] = [al, be, -al * mb - be * ma];
            }
        }
        let m = self.masked as f64;
        let value = total / m;
        if !want_grad {
            return (value, None);
        }
        box_sum_lanes(&mut coef, shape, r);
        let inv_m = 1.0 / m;
        let grad = coef.iter().enumerate().map(|(j, [ba, bb, bg])| (b[j] * ba + a[j] * bb + bg) * inv_m).collect();
        (value, Some(grad))
    }
}

/// Precomputed window sums of the image a warped image is compared against.
#[derive(Clone, Debug)]
pub struct LnccTarget {
    data: Vec<f64>,
    stats: Vec<[f64; 2]>,
}

/// Local NCC averaged over masked voxels (higher is better).
pub fn lncc(a: &ScalarVolume, b: &ScalarVolume, mask: &MaskVolume, window_radius: usize) -> Result<f64> {
    a.geometry.ensure_same(&b.geometry, "lncc")?;
    a.geometry.ensure_same(&mask.geometry, "lncc mask")?;
    let ctx = LnccContext::new(mask, window_radius)?;
    Ok(ctx.evaluate(&a.data, &b.data, false).0)
}

/// Channelwise local NCC averaged over channels.
pub fn multichannel_lncc(a: &MindVolume, b: &MindVolume, mask: &MaskVolume, window_radius: usize) -> Result<f64> {
    a.geometry.ensure_same(&b.geometry, "multichannel lncc")?;
    if a.channels.len() != b.channels.len() || a.channels.is_empty() {
        return Err(Error::GeometryMismatch(format!(
            "channel counts {} and {}",
            a.channels.len(),
            b.channels.len()
        )));
    }
    let ctx = LnccContext::new(mask, window_radius)?;
    let sum: f64 = a.channels.iter().zip(&b.channels).map(|(x, y)| ctx.evaluate(&x.data, &y.data, false).0).sum();
    Ok(sum / a.channels.len() as f64)
}

/// Voxels where every forward difference exists and the mask is set.
fn diffusion_voxels(shape: [usize; 3], mask: &[bool]) -> Vec<usize> {
    let [n0, n1, n2] = shape;
    let mut out = Vec::new();
    for i in 0..n0 - 1 {
        for j in 0..n1 - 1 {
            for k in 0..n2 - 1 {
                let idx = (i * n1 + j) * n2 + k;
                if mask[idx] {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// Mean squared forward-difference Jacobian norm over masked interior voxels,
/// with the gradient with respect to every displacement when requested.
pub fn diffusion_with_grad(data: &[Vec3], shape: [usize; 3], mask: &[bool], want_grad: bool) -> (f64, Option<Vec<Vec3>>) {
    let voxels = diffusion_voxels(shape, mask);
    if voxels.is_empty() {
        return (0.0, want_grad.then(|| vec![[0.0; 3]; data.len()]));
    }
    let strides = [shape[1] * shape[2], shape[2], 1];
    let scale = 1.0 / voxels.len() as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![[0.0; 3]; data.len()] } else { Vec::new() };
    for &idx in &voxels {
        for stride in strides {
            let hi = data[idx + stride];
            let lo = data[idx];
            for c in 0..3 {
                let d = hi[c] - lo[c];
                total += d * d;
                if want_grad {
                    grad[idx + stride][c] += 2.0 * d * scale;
                    grad[idx][c] -= 2.0 * d * scale;
                }
            }
        }
    }
    (total * scale, want_grad.then_some(grad))
}

pub fn diffusion_regularizer(u: &VectorField, mask: &MaskVolume) -> Result<f64> {
    u.geometry.ensure_same(&mask.geometry, "diffusion mask")?;
    Ok(diffusion_with_grad(&u.data, u.geometry.shape, &mask.data, false).0)
}

/// Non-diffeomorphic volume and its gradient through the rectifier.
pub fn ndv_with_grad(data: &[Vec3], shape: [usize; 3], want_grad: bool) -> (f64, Option<Vec<Vec3>>) {
    let n = interior_count(shape);
    let mut grad = if want_grad { vec![[0.0; 3]; data.len()] } else { Vec::new() };
    if n == 0 {
        return (0.0, want_grad.then_some(grad));
    }
    let scale = 1.0 / n as f64;
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut total = 0.0;
    for idx in interior_indices(shape) {
        let m = central_jacobian(data, shape, idx);
        let det = det3(&m);
        if det < 0.0 {
            total -= det;
            if want_grad {
                let cof = cofactor3(&m);
                for (a, &stride) in strides.iter().enumerate() {
                    for c in 0..3 {
                        // d(-det)/du_c(idx +- e_a) = -+ cof[c][a] / 2
                        let g = 0.5 * cof[c][a] * scale;
                        grad[idx + stride][c] -= g;
                        grad[idx - stride][c] += g;
                    }
                }
            }
        }
    }
    (total * scale, want_grad.then_some(grad))
}

pub fn ndv_penalty(u: &VectorField) -> f64 {
    crate::deformation::non_diffeomorphic_volume(u)
}

/// Mean squared displacement of the left-fold composition of a cycle over the
/// mask, with gradients with respect to every field of the cycle.
pub fn group_consistency_with_grad(
    cycle: &[&[Vec3]],
    shape: [usize; 3],
    mask: &[bool],
    want_grad: bool,
) -> (f64, Option<Vec<Vec<Vec3>>>) {
    let len: usize = shape.iter().product();
    let m = mask.iter().filter(|&&b| b).count();
    let mut grads: Vec<Vec<Vec3>> = if want_grad { vec![vec![[0.0; 3]; len]; cycle.len()] } else { Vec::new() };
    if m == 0 {
        return (0.0, want_grad.then_some(grads));
    }
    let scale = 1.0 / m as f64;
    let mut total = 0.0;
    let mut path: Vec<Vec3> = Vec::with_capacity(cycle.len());
    for idx in 0..len {
        if !mask[idx] {
            continue;
        }
        let x = {
            let k = idx % shape[2];
            let rest = idx / shape[2];
            [(rest / shape[1]) as f64, (rest % shape[1]) as f64, k as f64]
        };
        // path[k] is the point at which field k is sampled
        path.clear();
        let mut y = x;
        for (k, field) in cycle.iter().enumerate() {
            path.push(y);
            let d = if k == 0 { field[idx] } else { crate::volume::sample_vector(field, shape, y) };
            y = [y[0] + d[0], y[1] + d[1], y[2] + d[2]];
        }
        let r = [y[0] - x[0], y[1] - x[1], y[2] - x[2]];
        total += r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
        if !want_grad {
            continue;
        }
        let mut g = r.map(|c| 2.0 * c * scale);
        for k in (1..cycle.len()).rev() {
            let (w_idx, w) = trilinear_weights(shape, path[k]);
            for n in 0..8 {
                let slot = &mut grads[k][w_idx[n]];
                for c in 0..3 {
                    slot[c] += w[n] * g[c];
                }
            }
            let (_, jac) = sample_vector_jacobian(cycle[k], shape, path[k]);
            // g <- (I + J)^T g
            g = std::array::from_fn(|a| g[a] + (0..3).map(|c| jac[c][a] * g[c]).sum::<f64>());
        }
        let slot = &mut grads[0][idx];
        for c in 0..3 {
            slot[c] += g[c];
        }
    }
    (total * scale, want_grad.then_some(grads))
}

pub fn group_consistency(cycle: &[VectorField], mask: &MaskVolume) -> Result<f64> {
    if cycle.len() < 2 {
        return Err(Error::InvalidParameter("a cycle needs at least two fields".into()));
    }
    for f in cycle {
        f.geometry.ensure_same(&mask.geometry, "group consistency")?;
    }
    let refs: Vec<&[Vec3]> = cycle.iter().map(|f| f.data.as_slice()).collect();
    Ok(group_consistency_with_grad(&refs, mask.geometry.shape, &mask.data, false).0)
}
