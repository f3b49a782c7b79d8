use mindreg::deformation::non_diffeomorphic_volume;
use mindreg::engine::{register_pair, RegistrationConfig};
use mindreg::ensemble::*;
use mindreg::synth::{make_case, BenchCase, PhantomSpec};

fn case() -> BenchCase {
    make_case(&PhantomSpec { shape: [24; 3], seed: 6, ..PhantomSpec::default() }).unwrap()
}

fn quick() -> RegistrationConfig {
    RegistrationConfig { iterations_per_level: 16, final_phase_iterations: 4, ..RegistrationConfig::default() }
}

#[test]
fn single_member_equals_plain_registration() {
    let c = case();
    let ens = EnsembleConfig { members: 1, seed_base: 0, ..EnsembleConfig::default() };
    let members = run_ensemble(&c.fixed, &c.moving, &quick(), &ens).unwrap();
    assert_eq!(members, vec![register_pair(&c.fixed, &c.moving, &quick()).unwrap()]);
}

#[test]
fn ensembles_are_deterministic_diverse_and_safe() {
    let c = case();
    let config = quick();
    let ens = EnsembleConfig { members: 4, seed_base: 11, ..EnsembleConfig::default() };
    let a = run_ensemble(&c.fixed, &c.moving, &config, &ens).unwrap();
    let b = run_ensemble(&c.fixed, &c.moving, &config, &ens).unwrap();
    assert_eq!(a, b);
    let mut distinct: Vec<&Vec<[f64; 3]>> = a.iter().map(|r| &r.forward_stack.stages[0].coefficients).collect();
    distinct.dedup();
    assert!(distinct.len() >= 2);
    let avg = ensemble_average(&a, &c.fixed, &c.moving, &config).unwrap();
    assert_eq!(avg.loss_history.len(), 1);
    for stage in &avg.forward_stack.stages {
        stage.check_bound().unwrap();
    }
    assert_eq!(non_diffeomorphic_volume(&avg.forward_dense().unwrap()), 0.0);
    assert!(avg.inverse_consistency_residual().unwrap() < 0.05);
    assert_eq!(avg, ensemble_average(&b, &c.fixed, &c.moving, &config).unwrap());
}

#[test]
fn averaging_copies_of_one_result_reproduces_it() {
    let c = case();
    let r = register_pair(&c.fixed, &c.moving, &quick()).unwrap();
    let avg = ensemble_average(&[r.clone(), r.clone(), r.clone()], &c.fixed, &c.moving, &quick()).unwrap();
    assert_eq!(avg.forward_stack, r.forward_stack);
    assert_eq!(avg.backward_stages, r.backward_stages);
}

#[test]
fn invalid_ensemble_settings_are_rejected() {
    let c = case();
    for ens in [
        EnsembleConfig { members: 0, ..EnsembleConfig::default() },
        EnsembleConfig { perturbation_scale: -0.1, ..EnsembleConfig::default() },
    ] {
        assert!(run_ensemble(&c.fixed, &c.moving, &quick(), &ens).is_err());
    }
    assert!(ensemble_average(&[], &c.fixed, &c.moving, &quick()).is_err());
}
