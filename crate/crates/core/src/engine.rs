//! Multiresolution symmetric registration by Adam over constrained B-spline
//! stage updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bspline::BSplineField;
use crate::deformation::{compose, stack_inverse_dense, stack_inverses, stack_to_dense, StageStack};
use crate::losses::{group_consistency, LossReport, LossWeights, DEFAULT_WINDOW_RADIUS};
use crate::mind::{mind_transform, MindParams};
use crate::objective::{LevelImages, LevelObjective, PairObjective, TripletObjective};
use crate::volume::{
    downsample_by_two, foreground_mask, MaskVolume, ScalarVolume, Vec3, VectorField, DEFAULT_MASK_QUANTILE,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySpace {
    RawIntensity,
    Mind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub iterations_per_level: usize,
    /// Trailing iterations of the finest level in which the NDV and group
    /// consistency weights are active.
    pub final_phase_iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Control spacing of each level on the full-resolution grid, coarsest first.
    pub control_spacing_schedule: Vec<usize>,
    pub weights: LossWeights,
    pub similarity_space: SimilaritySpace,
    pub mind: MindParams,
    pub window_radius: usize,
    pub mask_dilation: usize,
    /// Half-width of the uniform initial raw coefficients as a fraction of
    /// each stage bound; 0 starts every stage at the identity.
    pub init_perturbation: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations_per_level: 100,
            final_phase_iterations: 30,
            learning_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            control_spacing_schedule: vec![8, 4, 2],
            weights: LossWeights { ndv: 1.0, group_consistency: 1.0, ..LossWeights::default() },
            similarity_space: SimilaritySpace::Mind,
            mind: MindParams::default(),
            window_radius: DEFAULT_WINDOW_RADIUS,
            mask_dilation: 2,
            init_perturbation: 0.0,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.levels == 0 {
            return bad("levels must be at least 1");
        }
        if self.control_spacing_schedule.len() != self.levels {
            return bad("control spacing schedule length must equal levels");
        }
        if self.control_spacing_schedule.windows(2).any(|w| w[1] >= w[0]) || self.control_spacing_schedule.contains(&0)
        {
            return bad("control spacings must be positive and strictly decreasing");
        }
        if self.final_phase_iterations > self.iterations_per_level {
            return bad("final phase cannot exceed the iterations per level");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.window_radius == 0 {
            return bad("window radius must be positive");
        }
        if !(self.init_perturbation >= 0.0) {
            return bad("init perturbation must be nonnegative");
        }
        self.weights.validate()?;
        self.mind.validate()
    }

    /// Weights active at a given iteration; NDV and group consistency only in
    /// the final phase of the finest level.
    pub fn active_weights(&self, level: usize, iteration: usize) -> LossWeights {
        let final_phase = level + 1 == self.levels
            && iteration + self.final_phase_iterations >= self.iterations_per_level
            && self.final_phase_iterations > 0;
        self.weights_for(final_phase)
    }

    fn weights_for(&self, final_phase: bool) -> LossWeights {
        if final_phase {
            self.weights
        } else {
            LossWeights { ndv: 0.0, group_consistency: 0.0, ..self.weights }
        }
    }
}

/// Hand-rolled Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, config: &RegistrationConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_epsilon,
            t: 0,
            m: vec![0.0; 3 * len],
            v: vec![0.0; 3 * len],
        }
    }

    pub fn step(&mut self, params: &mut [Vec3], grad: &[Vec3]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (n, (p, g)) in params.iter_mut().zip(grad).enumerate() {
            for a in 0..3 {
                let i = 3 * n + a;
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[a];
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[a] * g[a];
                p[a] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Stages mapping fixed-image points into the moving image, coarsest first.
    pub forward_stack: StageStack,
    /// Dense inverses of the stages, in the order they act on points (finest first).
    pub backward_stages: Vec<VectorField>,
    pub loss_history: Vec<LossReport>,
    /// Per level: stage loss at the end is no larger than at the start.
    pub converged_flags: Vec<bool>,
}

impl RegistrationResult {
    /// Rebuild the backward stages of a forward stack.
    pub fn from_forward(forward_stack: StageStack, loss_history: Vec<LossReport>, converged_flags: Vec<bool>) -> Result<Self> {
        let backward_stages = stack_inverses(&forward_stack)?;
        Ok(Self { forward_stack, backward_stages, loss_history, converged_flags })
    }

    pub fn forward_dense(&self) -> Result<VectorField> {
        stack_to_dense(&self.forward_stack)
    }

    /// Inverse of the forward dense field, refined against it pointwise.
    pub fn backward_dense(&self) -> Result<VectorField> {
        stack_inverse_dense(&self.forward_stack)
    }

    /// Max displacement left after applying the backward then the forward map.
    pub fn inverse_consistency_residual(&self) -> Result<f64> {
        let fwd = self.forward_dense()?;
        let bwd = self.backward_dense()?;
        Ok(compose(&bwd, &fwd)?.max_norm())
    }
}

/// Coarsest-first pyramid by repeated halving.
pub fn build_pyramid(img: &ScalarVolume, levels: usize) -> Result<Vec<ScalarVolume>> {
    if levels == 0 {
        return Err(Error::InvalidParameter("levels must be at least 1".into()));
    }
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample_by_two(out.last().expect("nonempty"))?;
        if next.geometry.shape.iter().any(|&n| n < 4) {
            return Err(Error::TooSmall("coarsest level below 4 voxels".into()));
        }
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Feature channels per level, coarsest first.
pub fn feature_pyramid(img: &ScalarVolume, config: &RegistrationConfig) -> Result<Vec<Vec<ScalarVolume>>> {
    build_pyramid(img, config.levels)?
        .into_iter()
        .map(|level| match config.similarity_space {
            SimilaritySpace::Mind => Ok(mind_transform(&level, &config.mind)?.channels),
            SimilaritySpace::RawIntensity => Ok(vec![level]),
        })
        .collect()
}

/// Dilated foreground mask of the fixed image.
pub fn registration_mask(fixed: &ScalarVolume, config: &RegistrationConfig) -> Result<MaskVolume> {
    Ok(foreground_mask(fixed, DEFAULT_MASK_QUANTILE)?.dilate_by(config.mask_dilation))
}

/// Everything the per-level objectives need, computed once per pair.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub fixed_features: Vec<Vec<ScalarVolume>>,
    pub moving_features: Vec<Vec<ScalarVolume>>,
    pub mask: MaskVolume,
}

impl PreparedPair {
    pub fn new(fixed: &ScalarVolume, moving: &ScalarVolume, config: &RegistrationConfig) -> Result<Self> {
        config.validate()?;
        fixed.geometry.ensure_same(&moving.geometry, "register")?;
        if fixed.is_constant() || moving.is_constant() {
            return Err(Error::DegenerateIntensity);
        }
        Ok(Self {
            fixed_features: feature_pyramid(fixed, config)?,
            moving_features: feature_pyramid(moving, config)?,
            mask: registration_mask(fixed, config)?,
        })
    }

    pub fn level_images(&self, level: usize, levels: usize) -> LevelImages {
        let factor = 1usize << (levels - 1 - level);
        let geom = self.fixed_features[level][0].geometry;
        LevelImages {
            factor,
            fixed: self.fixed_features[level].clone(),
            moving: self.moving_features[level].clone(),
            mask: self.mask.subsample(factor, geom),
        }
    }

    /// Pair objective for `level` given the stages completed so far.
    pub fn objective(&self, config: &RegistrationConfig, stack: &StageStack, level: usize) -> Result<PairObjective> {
        let template = BSplineField::zeros(self.mask.geometry, config.control_spacing_schedule[level])?;
        let accumulated = if stack.is_empty() {
            None
        } else {
            Some((stack_to_dense(stack)?, stack_inverse_dense(stack)?))
        };
        PairObjective::new(
            self.level_images(level, config.levels),
            template,
            accumulated.as_ref().map(|(f, b)| (f, b)),
            config.window_radius,
        )
    }
}

/// Gradient of the total loss with respect to the raw coefficients of stage
/// `stage_index`, the earlier stages of `stack` held fixed. `final_phase`
/// selects whether NDV and group weights are active.
pub fn loss_gradient(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    config: &RegistrationConfig,
    stack: &StageStack,
    stage_index: usize,
    raw: &[Vec3],
    final_phase: bool,
) -> Result<(LossReport, Vec<Vec3>)> {
    if stage_index >= config.levels || stage_index > stack.len() {
        return Err(Error::InvalidParameter(format!("stage index {stage_index} out of range")));
    }
    let prepared = PreparedPair::new(fixed, moving, config)?;
    let prefix = StageStack { stages: stack.stages[..stage_index].to_vec() };
    let mut obj = LevelObjective {
        pair: prepared.objective(config, &prefix, stage_index)?,
        weights: config.weights_for(final_phase),
        earlier: vec![],
        level: stage_index,
    };
    obj.loss_and_gradient(raw)
}

fn stage_loss(report: &LossReport) -> f64 {
    report.stage_losses.last().copied().unwrap_or(report.total)
}

/// Lowest-loss parameters seen during a level; ties keep the earlier iterate.
struct BestIterate<T> {
    loss: f64,
    params: Option<T>,
}

impl<T: Clone> BestIterate<T> {
    fn new() -> Self {
        Self { loss: f64::INFINITY, params: None }
    }

    fn offer(&mut self, loss: f64, params: &T) {
        if loss < self.loss {
            self.loss = loss;
            self.params = Some(params.clone());
        }
    }

    fn take(self, fallback: T) -> T {
        self.params.unwrap_or(fallback)
    }
}

fn initial_raw(template: &BSplineField, config: &RegistrationConfig, level: usize, salt: u64) -> Vec<Vec3> {
    if config.init_perturbation == 0.0 {
        return vec![[0.0; 3]; template.control_count()];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(salt * 64 + level as u64);
    let h = config.init_perturbation * template.bound;
    (0..template.control_count()).map(|_| [0; 3].map(|_| rng.random_range(-h..=h))).collect()
}

pub fn register_pair(fixed: &ScalarVolume, moving: &ScalarVolume, config: &RegistrationConfig) -> Result<RegistrationResult> {
    let prepared = PreparedPair::new(fixed, moving, config)?;
    let mut stack = StageStack::new();
    let mut history = Vec::new();
    let mut flags = Vec::new();
    let mut earlier = Vec::new();
    for level in 0..config.levels {
        let mut obj = LevelObjective {
            pair: prepared.objective(config, &stack, level)?,
            weights: config.weights_for(false),
            earlier: earlier.clone(),
            level,
        };
        let mut raw = initial_raw(&obj.pair.template, config, level, 0);
        let start = obj.loss(&raw)?.stage_losses.last().copied().unwrap_or(0.0);
        let mut adam = Adam::new(raw.len(), config);
        let closing = config.active_weights(level, config.iterations_per_level.saturating_sub(1));
        let mut best = BestIterate::new();
        obj.weights = closing;
        best.offer(stage_loss(&obj.loss(&raw)?), &raw);
        for it in 0..config.iterations_per_level {
            obj.weights = config.active_weights(level, it);
            let (mut report, grad) = obj.loss_and_gradient(&raw)?;
            if obj.weights == closing {
                best.offer(stage_loss(&report), &raw);
            }
            report.iteration = it;
            history.push(report);
            adam.step(&mut raw, &grad);
        }
        obj.weights = closing;
        best.offer(stage_loss(&obj.loss(&raw)?), &raw);
        let raw = best.take(raw);
        obj.weights = config.weights_for(false);
        let end = obj.loss(&raw)?.stage_losses.last().copied().unwrap_or(0.0);
        flags.push(end <= start);
        let stage = obj.pair.template.clamp_coefficients(&raw)?;
        stack.push(stage)?;
        earlier.push(end);
    }
    RegistrationResult::from_forward(stack, history, flags)
}

/// Jointly register the cycle `a -> b`, `b -> c`, `c -> a`; results are in
/// that order, each with `(fixed, moving)` = `(a, b)`, `(b, c)`, `(c, a)`.
pub fn register_triplet(
    a: &ScalarVolume,
    b: &ScalarVolume,
    c: &ScalarVolume,
    config: &RegistrationConfig,
) -> Result<Vec<RegistrationResult>> {
    let prepared =
        [PreparedPair::new(a, b, config)?, PreparedPair::new(b, c, config)?, PreparedPair::new(c, a, config)?];
    let mut stacks = vec![StageStack::new(); 3];
    let mut histories = vec![Vec::new(); 3];
    let mut flags = vec![Vec::new(); 3];
    let mut earlier = vec![Vec::new(); 3];
    for level in 0..config.levels {
        let pairs = (0..3).map(|k| prepared[k].objective(config, &stacks[k], level)).collect::<Result<Vec<_>>>()?;
        let mut obj = TripletObjective { pairs, weights: config.weights_for(false), earlier: earlier.clone(), level };
        let mut raws: Vec<Vec<Vec3>> =
            (0..3).map(|k| initial_raw(&obj.pairs[k].template, config, level, k as u64)).collect();
        let start = obj.evaluate(&raws, false)?.0;
        let mut adams: Vec<Adam> = raws.iter().map(|r| Adam::new(r.len(), config)).collect();
        let closing = config.active_weights(level, config.iterations_per_level.saturating_sub(1));
        let mut best = BestIterate::new();
        let joint = |reports: &[LossReport]| reports.iter().map(stage_loss).sum::<f64>();
        obj.weights = closing;
        best.offer(joint(&obj.evaluate(&raws, false)?.0), &raws);
        for it in 0..config.iterations_per_level {
            obj.weights = config.active_weights(level, it);
            let (reports, grads) = obj.evaluate(&raws, true)?;
            if obj.weights == closing {
                best.offer(joint(&reports), &raws);
            }
            for k in 0..3 {
                let mut r = reports[k].clone();
                r.iteration = it;
                histories[k].push(r);
                adams[k].step(&mut raws[k], &grads[k]);
            }
        }
        obj.weights = closing;
        best.offer(joint(&obj.evaluate(&raws, false)?.0), &raws);
        let raws = best.take(raws);
        obj.weights = config.weights_for(false);
        let end = obj.evaluate(&raws, false)?.0;
        for k in 0..3 {
            let (s, e) = (start[k].stage_losses.last().copied(), end[k].stage_losses.last().copied());
            flags[k].push(e <= s);
            stacks[k].push(obj.pairs[k].template.clamp_coefficients(&raws[k])?)?;
            earlier[k].push(e.unwrap_or(0.0));
        }
    }
    let mut out = Vec::with_capacity(3);
    for ((stack, history), f) in stacks.into_iter().zip(histories).zip(flags) {
        out.push(RegistrationResult::from_forward(stack, history, f)?);
    }
    Ok(out)
}

/// Mean squared displacement of the full-resolution cycle composition of a
/// triplet result over the given mask.
pub fn cycle_residual(results: &[RegistrationResult], mask: &MaskVolume) -> Result<f64> {
    let dense = results.iter().map(|r| r.forward_dense()).collect::<Result<Vec<_>>>()?;
    group_consistency(&dense, mask)
}

/// Final full-resolution evaluation of all loss terms for a forward stack,
/// with every weight active.
pub fn evaluate_stack(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    config: &RegistrationConfig,
    stack: &StageStack,
) -> Result<LossReport> {
    let last = stack.len().checked_sub(1).ok_or_else(|| Error::StructureMismatch("empty stage stack".into()))?;
    let prepared = PreparedPair::new(fixed, moving, config)?;
    let prefix = StageStack { stages: stack.stages[..last].to_vec() };
    let mut full = config.clone();
    full.levels = 1;
    full.control_spacing_schedule = vec![stack.stages[last].control_spacing];
    let finest = PreparedPair {
        fixed_features: vec![prepared.fixed_features.last().expect("levels").clone()],
        moving_features: vec![prepared.moving_features.last().expect("levels").clone()],
        mask: prepared.mask.clone(),
    };
    let mut pair = finest.objective(&full, &prefix, 0)?;
    let weights = config.weights_for(true);
    let eval = pair.evaluate(&stack.stages[last], &weights, false);
    let obj = LevelObjective { pair, weights, earlier: vec![], level: config.levels - 1 };
    Ok(obj.report(&eval, 0))
}
