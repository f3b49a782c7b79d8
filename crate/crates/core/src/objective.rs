//! Per-level registration objective and its analytic gradient with respect
//! to the coefficients of the stage being optimised.
//!
//! Level `l` works on images decimated by `f`, whose grid point `i` sits at
//! full-resolution position `X = f * i`. With accumulated forward field `U`
//! and its inverse `V`, the current stage `d` gives
//!
//! * forward map  `T(X) = p + d(p)`, `p = X + U(X)`;
//! * backward map `B(X) = q + V(q)`, where `q + d(q) = X`.
//!
//! Features are sampled at `T / f` and `B / f`; regularisers act on the
//! displacements `(T - X) / f` and `(B - X) / f` in level voxels.

use crate::bspline::{BSplineField, BasisSupport};
use crate::deformation::solve3;
use crate::losses::{
    diffusion_with_grad, group_consistency_with_grad, ndv_with_grad, DirectionTerms, LnccContext, LnccTarget, LossReport,
    LossWeights,
};
use crate::volume::{
    sample_in_cell, sample_value_in_cell, sample_vector_corners, sample_vector_jacobian, trilinear_cell, MaskVolume, ScalarVolume, TrilinearCell,
    Vec3, VectorField,
};
use crate::{Error, Result};

const NEWTON_TOL: f64 = 1e-10;
/// Residual below which a warm start is kept without a Newton step.
const NEWTON_SKIP_TOL: f64 = 1e-14;
const NEWTON_MAX_ITER: usize = 60;

/// Feature channels of one pyramid level for both images.
#[derive(Clone, Debug)]
pub struct LevelImages {
    pub factor: usize,
    pub fixed: Vec<ScalarVolume>,
    pub moving: Vec<ScalarVolume>,
    pub mask: MaskVolume,
}

impl LevelImages {
    pub fn shape(&self) -> [usize; 3] {
        self.mask.geometry.shape
    }
}

/// Evaluation of one pair before the forward gradient is scattered.
#[derive(Clone, Debug)]
pub struct PairEval {
    pub forward: DirectionTerms,
    pub backward: DirectionTerms,
    /// Forward displacement in level voxels on the level grid.
    pub forward_level: Vec<Vec3>,
    /// Gradient with respect to the forward map `T` at each level point.
    pub grad_t: Vec<Vec3>,
    /// Backward contribution already expressed per coefficient.
    pub grad_coef: Vec<Vec3>,
}

/// Objective of one image pair at one level.
#[derive(Clone, Debug)]
pub struct PairObjective {
    pub images: LevelImages,
    pub template: BSplineField,
    lncc: LnccContext,
    fixed_targets: Vec<LnccTarget>,
    moving_targets: Vec<LnccTarget>,
    points: Vec<Vec3>,
    p_support: Vec<BasisSupport>,
    p: Vec<Vec3>,
    inverse: Option<VectorField>,
    warm: Vec<Vec3>,
    cache: StageCache,
}

/// Values of the previous evaluation that stay exact wherever no supporting
/// coefficient changed.
#[derive(Clone, Debug, Default)]
struct StageCache {
    coefficients: Vec<Vec3>,
    t: Vec<Vec3>,
    /// Warm start passed the residual check and has not moved since.
    settled: Vec<bool>,
}

/// Summed-area table of control points whose coefficients changed.
struct ChangedControls {
    dims: [usize; 3],
    table: Vec<u32>,
}

impl ChangedControls {
    /// `None` when there is no previous evaluation to compare with.
    fn between(old: &[Vec3], stage: &BSplineField) -> Option<Self> {
        if old.len() != stage.coefficients.len() {
            return None;
        }
        let c = stage.control_shape;
        let dims = c.map(|n| n + 1);
        let at = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
        let mut table = vec![0u32; dims.iter().product()];
        for i in 0..c[0] {
            for j in 0..c[1] {
                for k in 0..c[2] {
                    let idx = stage.control_index(i, j, k);
                    let flag = u32::from(old[idx] != stage.coefficients[idx]);
                    table[at(i + 1, j + 1, k + 1)] = flag + table[at(i, j + 1, k + 1)] + table[at(i + 1, j, k + 1)]
                        + table[at(i + 1, j + 1, k)]
                        + table[at(i, j, k)]
                        - table[at(i, j, k + 1)]
                        - table[at(i, j + 1, k)]
                        - table[at(i + 1, j, k)];
                }
            }
        }
        Some(Self { dims, table })
    }

    /// Whether any control point in the 4x4x4 support starting at `s` changed.
    #[inline]
    fn touches(&self, s: [usize; 3]) -> bool {
        let d = self.dims;
        let at = |i: usize, j: usize, k: usize| self.table[(i * d[1] + j) * d[2] + k];
        let e = s.map(|v| v + 4);
        let plus = at(e[0], e[1], e[2]) + at(s[0], s[1], e[2]) + at(s[0], e[1], s[2]) + at(e[0], s[1], s[2]);
        let minus = at(s[0], e[1], e[2]) + at(e[0], s[1], e[2]) + at(e[0], e[1], s[2]) + at(s[0], s[1], s[2]);
        plus != minus
    }
}

#[inline]
fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn scaled(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
fn plus_identity(mut m: [Vec3; 3]) -> [Vec3; 3] {
    for (c, row) in m.iter_mut().enumerate() {
        row[c] += 1.0;
    }
    m
}

#[inline]
fn transpose(m: &[Vec3; 3]) -> [Vec3; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[c][r]))
}

/// `(I + J)^T g`
#[inline]
fn apply_transposed(jac: &[Vec3; 3], g: Vec3) -> Vec3 {
    std::array::from_fn(|a| g[a] + jac[0][a] * g[0] + jac[1][a] * g[1] + jac[2][a] * g[2])
}

/// Solve `q + d(q) = x` for `q = x + w` by Newton from the current `w`;
/// returns `q`, the stage Jacobian at the last evaluation and whether the warm
/// start was kept. Once a step is below the tolerance the residual after it
/// is of its square.
fn solve_preimage(stage: &BSplineField, x: Vec3, w: &mut Vec3, want_jac: bool) -> (Vec3, [Vec3; 3], bool) {
    let mut jac = [[0.0; 3]; 3];
    if !want_jac {
        let r = add(*w, stage.eval(add(x, *w)));
        if r.iter().all(|c| c.abs() < NEWTON_SKIP_TOL) {
            return (add(x, *w), jac, true);
        }
    }
    for _ in 0..NEWTON_MAX_ITER {
        let (d, j) = stage.eval_with_jacobian(add(x, *w));
        jac = j;
        let r = add(*w, d);
        let step = solve3(&plus_identity(jac), r).unwrap_or(r);
        for c in 0..3 {
            w[c] -= step[c];
        }
        if step.iter().all(|c| c.abs() < NEWTON_TOL) {
            break;
        }
    }
    (add(x, *w), jac, false)
}

fn sample_channels(
    channels: &[ScalarVolume],
    pos: &[Vec3],
    inv_f: f64,
    want_grad: bool,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec3>>) {
    let shape = channels[0].geometry.shape;
    let cells: Vec<TrilinearCell> = pos.iter().map(|&t| trilinear_cell(shape, scaled(t, inv_f))).collect();
    let mut values = Vec::with_capacity(channels.len());
    let mut grads = Vec::with_capacity(channels.len());
    if !want_grad {
        for ch in channels {
            values.push(cells.iter().map(|cell| sample_value_in_cell(&ch.data, shape, cell)).collect());
        }
        return (values, grads);
    }
    for ch in channels {
        let mut v = Vec::with_capacity(pos.len());
        let mut g = Vec::with_capacity(pos.len());
        for cell in &cells {
            let (val, grad) = sample_in_cell(&ch.data, shape, cell);
            v.push(val);
            g.push(scaled(grad, inv_f));
        }
        values.push(v);
        grads.push(g);
    }
    (values, grads)
}

impl PairObjective {
    /// `accumulated` holds the forward and inverse dense fields of the stages
    /// completed so far, on the full-resolution grid.
    pub fn new(
        images: LevelImages,
        template: BSplineField,
        accumulated: Option<(&VectorField, &VectorField)>,
        window_radius: usize,
    ) -> Result<Self> {
        if images.fixed.len() != images.moving.len() || images.fixed.is_empty() {
            return Err(Error::GeometryMismatch("feature channel counts differ".into()));
        }
        let lncc = LnccContext::new(&images.mask, window_radius)?;
        let f = images.factor as f64;
        let level_geom = images.mask.geometry;
        let full = template.image_geometry;
        let points: Vec<Vec3> = (0..level_geom.len())
            .map(|idx| level_geom.coords(idx).map(|c| c as f64 * f))
            .collect();
        let (p, inverse) = match accumulated {
            Some((fwd, inv)) => {
                fwd.geometry.ensure_same(&full, "accumulated forward field")?;
                inv.geometry.ensure_same(&full, "accumulated inverse field")?;
                let p = points
                    .iter()
                    .map(|x| {
                        let [i, j, k] = x.map(|c| c as usize);
                        add(*x, fwd.at(i, j, k))
                    })
                    .collect();
                (p, Some(inv.clone()))
            }
            None => (points.clone(), None),
        };
        let p_support = p.iter().map(|&x| template.support(x)).collect();
        let warm = vec![[0.0; 3]; points.len()];
        let fixed_targets = images.fixed.iter().map(|c| lncc.target(&c.data)).collect();
        let moving_targets = images.moving.iter().map(|c| lncc.target(&c.data)).collect();
        let cache = StageCache { settled: vec![false; points.len()], ..StageCache::default() };
        Ok(Self { images, template, lncc, fixed_targets, moving_targets, points, p_support, p, inverse, warm, cache })
    }

    pub fn level_len(&self) -> usize {
        self.points.len()
    }

    /// Evaluate both directions for the clamped stage `stage`.
    pub fn evaluate(&mut self, stage: &BSplineField, weights: &LossWeights, want_grad: bool) -> PairEval {
        let shape = self.images.shape();
        let mask = &self.images.mask.data;
        let n = self.points.len();
        let f = self.images.factor as f64;
        let inv_f = 1.0 / f;
        let channels = self.images.fixed.len() as f64;
        let sim_scale = -weights.similarity / channels;

        let changed = ChangedControls::between(&self.cache.coefficients, stage);
        let unchanged = |s: [usize; 3]| changed.as_ref().is_some_and(|c| !c.touches(s));

        // forward direction
        let t: Vec<Vec3> = (0..n)
            .map(|v| {
                let sup = &self.p_support[v];
                if unchanged(sup.start) {
                    self.cache.t[v]
                } else {
                    add(self.p[v], stage.eval_support(sup))
                }
            })
            .collect();
        let forward_level: Vec<Vec3> =
            t.iter().zip(&self.points).map(|(t, x)| std::array::from_fn(|c| (t[c] - x[c]) * inv_f)).collect();
        let mut grad_t = vec![[0.0; 3]; if want_grad { n } else { 0 }];
        let (warped, wgrads) = sample_channels(&self.images.moving, &t, inv_f, want_grad);
        let mut sim_f = 0.0;
        for (c, target) in self.fixed_targets.iter().enumerate() {
            let (val, g) = self.lncc.evaluate_against(&warped[c], target, want_grad);
            sim_f += val;
            if let Some(g) = g {
                for v in 0..n {
                    let s = sim_scale * g[v];
                    for a in 0..3 {
                        grad_t[v][a] += s * wgrads[c][v][a];
                    }
                }
            }
        }
        let forward = self.regularise(&forward_level, shape, mask, weights, want_grad, &mut grad_t, sim_f / channels);

        // backward direction
        let mut q = Vec::with_capacity(n);
        let mut stage_jac = Vec::with_capacity(if want_grad { n } else { 0 });
        for (v, (x, w)) in self.points.iter().zip(self.warm.iter_mut()).enumerate() {
            let settled = &mut self.cache.settled[v];
            if !want_grad && *settled && unchanged(stage.support_start(add(*x, *w))) {
                q.push(add(*x, *w));
                continue;
            }
            let (qv, jac, kept) = solve_preimage(stage, *x, w, want_grad);
            *settled = kept;
            q.push(qv);
            if want_grad {
                stage_jac.push(jac);
            }
        }
        let mut inv_jac = Vec::new();
        let b: Vec<Vec3> = match &self.inverse {
            Some(inv) => q
                .iter()
                .map(|&qv| {
                    if !want_grad {
                        return add(qv, sample_vector_corners(&inv.data, inv.geometry.shape, qv));
                    }
                    let (v, jac) = sample_vector_jacobian(&inv.data, inv.geometry.shape, qv);
                    inv_jac.push(jac);
                    add(qv, v)
                })
                .collect(),
            None => q.clone(),
        };
        let backward_level: Vec<Vec3> =
            b.iter().zip(&self.points).map(|(b, x)| std::array::from_fn(|c| (b[c] - x[c]) * inv_f)).collect();
        let mut grad_b = vec![[0.0; 3]; if want_grad { n } else { 0 }];
        let (warped, wgrads) = sample_channels(&self.images.fixed, &b, inv_f, want_grad);
        let mut sim_b = 0.0;
        for (c, target) in self.moving_targets.iter().enumerate() {
            let (val, g) = self.lncc.evaluate_against(&warped[c], target, want_grad);
            sim_b += val;
            if let Some(g) = g {
                for v in 0..n {
                    let s = sim_scale * g[v];
                    for a in 0..3 {
                        grad_b[v][a] += s * wgrads[c][v][a];
                    }
                }
            }
        }
        let backward = self.regularise(&backward_level, shape, mask, weights, want_grad, &mut grad_b, sim_b / channels);

        let mut grad_coef = vec![[0.0; 3]; if want_grad { self.template.control_count() } else { 0 }];
        if want_grad {
            for v in 0..n {
                let gq = if self.inverse.is_some() { apply_transposed(&inv_jac[v], grad_b[v]) } else { grad_b[v] };
                let mt = transpose(&plus_identity(stage_jac[v]));
                let h = solve3(&mt, gq).unwrap_or(gq);
                let sup = self.template.support(q[v]);
                self.template.scatter(&sup, scaled(h, -1.0), &mut grad_coef);
            }
        }
        self.cache.coefficients.clone_from(&stage.coefficients);
        self.cache.t = t;
        PairEval { forward, backward, forward_level, grad_t, grad_coef }
    }

    /// Diffusion and NDV terms of one direction; adds their gradient with
    /// respect to the full-resolution map into `grad`.
    fn regularise(
        &self,
        level_disp: &[Vec3],
        shape: [usize; 3],
        mask: &[bool],
        weights: &LossWeights,
        want_grad: bool,
        grad: &mut [Vec3],
        similarity: f64,
    ) -> DirectionTerms {
        let inv_f = 1.0 / self.images.factor as f64;
        let (diffusion, dg) = diffusion_with_grad(level_disp, shape, mask, want_grad && weights.diffusion != 0.0);
        if let Some(dg) = dg {
            for (g, d) in grad.iter_mut().zip(&dg) {
                for a in 0..3 {
                    g[a] += weights.diffusion * inv_f * d[a];
                }
            }
        }
        let mut ndv = 0.0;
        if weights.ndv != 0.0 {
            let (value, ng) = ndv_with_grad(level_disp, shape, want_grad);
            ndv = value;
            if let Some(ng) = ng {
                for (g, d) in grad.iter_mut().zip(&ng) {
                    for a in 0..3 {
                        g[a] += weights.ndv * inv_f * d[a];
                    }
                }
            }
        }
        DirectionTerms { similarity, diffusion, ndv }
    }

    /// Scatter the forward-map gradient into coefficient space and add it to
    /// the backward contribution.
    pub fn coefficient_gradient(&self, eval: &PairEval) -> Vec<Vec3> {
        let mut out = eval.grad_coef.clone();
        for (sup, g) in self.p_support.iter().zip(&eval.grad_t) {
            self.template.scatter(sup, *g, &mut out);
        }
        out
    }

    /// Add a gradient given per level displacement (level voxels) to `grad_t`.
    pub fn add_level_displacement_grad(&self, eval: &mut PairEval, g: &[Vec3], weight: f64) {
        let s = weight / self.images.factor as f64;
        for (gt, gd) in eval.grad_t.iter_mut().zip(g) {
            for a in 0..3 {
                gt[a] += s * gd[a];
            }
        }
    }
}

/// Weighted stage loss of a pair under the given weights, without group terms.
pub fn pair_stage_loss(eval: &PairEval, w: &LossWeights) -> f64 {
    -w.similarity * (eval.forward.similarity + eval.backward.similarity)
        + w.diffusion * (eval.forward.diffusion + eval.backward.diffusion)
        + w.ndv * (eval.forward.ndv + eval.backward.ndv)
}

/// Chain a gradient with respect to clamped coefficients to the raw ones.
pub fn raw_gradient(clamped: &BSplineField, grad: &[Vec3]) -> Vec<Vec3> {
    let b = clamped.bound;
    clamped
        .coefficients
        .iter()
        .zip(grad)
        .map(|(c, g)| std::array::from_fn(|a| g[a] * (1.0 - (c[a] / b).powi(2))))
        .collect()
}

/// Objective of one pair at one level over raw stage coefficients.
#[derive(Clone, Debug)]
pub struct LevelObjective {
    pub pair: PairObjective,
    pub weights: LossWeights,
    /// Final stage losses of the completed levels, coarsest first.
    pub earlier: Vec<f64>,
    pub level: usize,
}

impl LevelObjective {
    pub fn report(&self, eval: &PairEval, iteration: usize) -> LossReport {
        let mut r = LossReport {
            level: self.level,
            iteration,
            total: 0.0,
            weights: self.weights,
            forward: eval.forward,
            backward: eval.backward,
            group_consistency: 0.0,
            stage_losses: self.earlier.clone(),
        };
        r.stage_losses.push(pair_stage_loss(eval, &self.weights));
        r.total = r.weighted_total();
        r
    }

    pub fn loss(&mut self, raw: &[Vec3]) -> Result<LossReport> {
        let stage = self.pair.template.clamp_coefficients(raw)?;
        let eval = self.pair.evaluate(&stage, &self.weights, false);
        Ok(self.report(&eval, 0))
    }

    /// Loss report and gradient with respect to the raw coefficients.
    pub fn loss_and_gradient(&mut self, raw: &[Vec3]) -> Result<(LossReport, Vec<Vec3>)> {
        let stage = self.pair.template.clamp_coefficients(raw)?;
        let eval = self.pair.evaluate(&stage, &self.weights, true);
        let grad = self.pair.coefficient_gradient(&eval);
        Ok((self.report(&eval, 0), raw_gradient(&stage, &grad)))
    }
}

/// Three pairs `(a, b)`, `(b, c)`, `(c, a)` optimised jointly with the cycle
/// consistency term on their forward maps, masked by the first fixed image.
#[derive(Clone, Debug)]
pub struct TripletObjective {
    pub pairs: Vec<PairObjective>,
    pub weights: LossWeights,
    pub earlier: Vec<Vec<f64>>,
    pub level: usize,
}

impl TripletObjective {
    /// Reports per pair and raw gradients per pair. Each report carries the
    /// shared cycle term.
    pub fn evaluate(&mut self, raws: &[Vec<Vec3>], want_grad: bool) -> Result<(Vec<LossReport>, Vec<Vec<Vec3>>)> {
        let w = self.weights;
        let mut stages = Vec::with_capacity(3);
        let mut evals = Vec::with_capacity(3);
        for (pair, raw) in self.pairs.iter_mut().zip(raws) {
            let stage = pair.template.clamp_coefficients(raw)?;
            evals.push(pair.evaluate(&stage, &w, want_grad));
            stages.push(stage);
        }
        let mut gc = 0.0;
        if w.group_consistency != 0.0 {
            let shape = self.pairs[0].images.shape();
            let mask = &self.pairs[0].images.mask.data;
            let refs: Vec<&[Vec3]> = evals.iter().map(|e| e.forward_level.as_slice()).collect();
            let (value, grads) = group_consistency_with_grad(&refs, shape, mask, want_grad);
            gc = value;
            if let Some(grads) = grads {
                for k in 0..3 {
                    self.pairs[k].add_level_displacement_grad(&mut evals[k], &grads[k], w.group_consistency);
                }
            }
        }
        let mut reports = Vec::with_capacity(3);
        let mut grads = Vec::with_capacity(3);
        for k in 0..3 {
            let mut r = LossReport {
                level: self.level,
                iteration: 0,
                total: 0.0,
                weights: w,
                forward: evals[k].forward,
                backward: evals[k].backward,
                group_consistency: gc,
                stage_losses: self.earlier[k].clone(),
            };
            r.stage_losses.push(pair_stage_loss(&evals[k], &w) + w.group_consistency * gc);
            r.total = r.weighted_total();
            reports.push(r);
            if want_grad {
                let g = self.pairs[k].coefficient_gradient(&evals[k]);
                grads.push(raw_gradient(&stages[k], &g));
            }
        }
        Ok((reports, grads))
    }
}
