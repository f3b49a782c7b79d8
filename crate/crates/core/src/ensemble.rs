//! Seeded registration ensembles averaged in B-spline coefficient space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::BSplineField;
use crate::deformation::StageStack;
use crate::engine::{evaluate_stack, register_pair, RegistrationConfig, RegistrationResult};
use crate::volume::ScalarVolume;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub seed_base: u64,
    /// Half-width of the uniform initial raw coefficients of members after
    /// the first, as a fraction of each stage bound.
    pub perturbation_scale: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { members: 5, seed_base: 0, perturbation_scale: 0.1 }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(Error::InvalidParameter("an ensemble needs at least one member".into()));
        }
        if !(self.perturbation_scale >= 0.0) {
            return Err(Error::InvalidParameter("perturbation scale must be nonnegative".into()));
        }
        Ok(())
    }

    /// Registration settings of member `i`.
    pub fn member_config(&self, base: &RegistrationConfig, i: usize) -> RegistrationConfig {
        RegistrationConfig {
            seed: self.seed_base + i as u64,
            init_perturbation: if i == 0 { 0.0 } else { self.perturbation_scale },
            ..base.clone()
        }
    }
}

/// Member results in member order.
pub fn run_ensemble(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    config: &RegistrationConfig,
    ens: &EnsembleConfig,
) -> Result<Vec<RegistrationResult>> {
    config.validate()?;
    ens.validate()?;
    (0..ens.members).into_par_iter().map(|i| register_pair(fixed, moving, &ens.member_config(config, i))).collect()
}

/// Stagewise elementwise mean of the constrained coefficients, in member order.
pub fn average_stacks(stacks: &[&StageStack]) -> Result<StageStack> {
    let first = stacks.first().ok_or_else(|| Error::StructureMismatch("nothing to average".into()))?;
    if stacks.iter().any(|s| s.len() != first.len()) {
        return Err(Error::StructureMismatch("members differ in stage count".into()));
    }
    let mut out = StageStack::new();
    for level in 0..first.len() {
        let fields: Vec<&BSplineField> = stacks.iter().map(|s| &s.stages[level]).collect();
        out.push(BSplineField::average(&fields)?)?;
    }
    Ok(out)
}

/// Averaged result with inverted stages and a single final loss evaluation.
pub fn ensemble_average(
    results: &[RegistrationResult],
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let stacks: Vec<&StageStack> = results.iter().map(|r| &r.forward_stack).collect();
    let stack = average_stacks(&stacks)?;
    let report = evaluate_stack(fixed, moving, config, &stack)?;
    let flags = (0..stack.len()).map(|l| results.iter().all(|r| r.converged_flags.get(l).copied().unwrap_or(false))).collect();
    RegistrationResult::from_forward(stack, vec![report], flags)
}
