use mindreg::deformation::{apply_warp, non_diffeomorphic_volume, StageStack};
use mindreg::engine::*;
use mindreg::losses::{lncc, LossWeights};
use mindreg::synth::{make_case, PhantomSpec};
use mindreg::volume::{foreground_mask, GridGeometry, ScalarVolume, DEFAULT_MASK_QUANTILE};

fn quick(iterations: usize) -> RegistrationConfig {
    RegistrationConfig { iterations_per_level: iterations, final_phase_iterations: iterations / 4, ..RegistrationConfig::default() }
}

fn blobs(g: GridGeometry, shift: [f64; 3]) -> ScalarVolume {
    let centers = [([12.0, 14.0, 15.0], 4.0, 1.0), ([19.0, 17.0, 13.0], 3.5, 0.6), ([15.0, 20.0, 19.0], 3.0, 0.8)];
    ScalarVolume::from_fn(g, |i, j, k| {
        let p = [i as f64 - shift[0], j as f64 - shift[1], k as f64 - shift[2]];
        centers
            .iter()
            .map(|(c, r, a)| {
                let d2: f64 = (0..3).map(|n| (p[n] - c[n]).powi(2)).sum();
                a * (-d2 / (2.0 * r * r)).exp()
            })
            .sum()
    })
}

#[test]
fn pyramid_shapes_and_constants() {
    let g = GridGeometry::with_shape([32; 3]).unwrap();
    let img = blobs(g, [0.0; 3]);
    let one = build_pyramid(&img, 1).unwrap();
    assert_eq!(one, vec![img.clone()]);
    let shapes: Vec<[usize; 3]> = build_pyramid(&img, 3).unwrap().iter().map(|v| v.geometry.shape).collect();
    assert_eq!(shapes, vec![[8; 3], [16; 3], [32; 3]]);
    for level in build_pyramid(&ScalarVolume::filled(g, 0.7), 3).unwrap() {
        assert!(level.data.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }
    assert!(build_pyramid(&img, 0).is_err());
    assert!(build_pyramid(&img, 5).is_err());
}

#[test]
fn config_validation() {
    assert!(RegistrationConfig::default().validate().is_ok());
    let bad = [
        RegistrationConfig { levels: 0, control_spacing_schedule: vec![], ..RegistrationConfig::default() },
        RegistrationConfig { control_spacing_schedule: vec![4, 8, 2], ..RegistrationConfig::default() },
        RegistrationConfig { learning_rate: 0.0, ..RegistrationConfig::default() },
        RegistrationConfig { final_phase_iterations: 200, ..RegistrationConfig::default() },
        RegistrationConfig { adam_beta1: 1.0, ..RegistrationConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}

#[test]
fn identical_images_stay_at_identity() {
    let case = make_case(&PhantomSpec { shape: [24; 3], deformation_max: 0.0, seed: 1, ..PhantomSpec::default() }).unwrap();
    let result = register_pair(&case.fixed, &case.fixed, &quick(30)).unwrap();
    let u = result.forward_dense().unwrap();
    assert!(u.max_norm() < 0.1, "max displacement {}", u.max_norm());
    let warped = apply_warp(&case.fixed, &u).unwrap();
    assert!(lncc(&case.fixed, &warped, &case.mask, 2).unwrap() >= 0.999);
    assert_eq!(non_diffeomorphic_volume(&u), 0.0);
}

#[test]
fn zero_stage_gradient_vanishes_for_identical_images() {
    let g = GridGeometry::with_shape([16; 3]).unwrap();
    let img = blobs(g, [-4.0; 3]);
    let config = RegistrationConfig { levels: 1, control_spacing_schedule: vec![4], ..RegistrationConfig::default() };
    let count = mindreg::bspline::BSplineField::zeros(g, 4).unwrap().control_count();
    let (report, grad) =
        loss_gradient(&img, &img, &config, &StageStack::new(), 0, &vec![[0.0; 3]; count], true).unwrap();
    assert!(grad.iter().all(|g| g.iter().all(|c| c.abs() < 1e-10)));
    assert!((report.forward.similarity - 1.0).abs() < 1e-12);
    assert_eq!(report.forward.diffusion, 0.0);
}

#[test]
fn registration_is_deterministic() {
    let case = make_case(&PhantomSpec { shape: [24; 3], seed: 3, ..PhantomSpec::default() }).unwrap();
    let config = RegistrationConfig { init_perturbation: 0.1, seed: 5, ..quick(20) };
    let a = register_pair(&case.fixed, &case.moving, &config).unwrap();
    let b = register_pair(&case.fixed, &case.moving, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.loss_history.len(), config.levels * config.iterations_per_level);
    assert_eq!(a.converged_flags.len(), config.levels);
    for stage in &a.forward_stack.stages {
        stage.check_bound().unwrap();
    }
    assert!(a.inverse_consistency_residual().unwrap() < 0.05);
}

#[test]
fn translation_is_recovered_with_the_right_sign() {
    let g = GridGeometry::with_shape([32; 3]).unwrap();
    let t = [2.0, 0.0, 0.0];
    let fixed = blobs(g, [0.0; 3]);
    let moving = blobs(g, t);
    let result = register_pair(&fixed, &moving, &RegistrationConfig::default()).unwrap();
    let u = result.forward_dense().unwrap();
    let mask = foreground_mask(&fixed, DEFAULT_MASK_QUANTILE).unwrap();
    let mean = u.masked_mean(&mask);
    for a in 0..3 {
        assert!((mean[a] - t[a]).abs() < 0.3, "mean displacement {mean:?}");
    }
}

#[test]
fn triplet_of_identical_images_has_no_cycle_error() {
    let case = make_case(&PhantomSpec { shape: [24; 3], deformation_max: 0.0, seed: 2, ..PhantomSpec::default() }).unwrap();
    let img = &case.fixed;
    let results = register_triplet(img, img, img, &quick(20)).unwrap();
    assert_eq!(results.len(), 3);
    for r in &results {
        assert!(r.forward_dense().unwrap().max_norm() < 0.1);
        assert!(r.inverse_consistency_residual().unwrap() < 0.05);
    }
    assert!(cycle_residual(&results, &case.mask).unwrap() < 1e-4);
}

#[test]
fn triplet_without_group_term_matches_pairwise_runs() {
    let spec = |seed| PhantomSpec { shape: [24; 3], seed, ..PhantomSpec::default() };
    let (a, b, c) = (make_case(&spec(1)).unwrap().moving, make_case(&spec(2)).unwrap().moving, make_case(&spec(3)).unwrap().moving);
    let config = RegistrationConfig { weights: LossWeights { ndv: 1.0, group_consistency: 0.0, ..LossWeights::default() }, ..quick(12) };
    let joint = register_triplet(&a, &b, &c, &config).unwrap();
    let pairwise = [
        register_pair(&a, &b, &config).unwrap(),
        register_pair(&b, &c, &config).unwrap(),
        register_pair(&c, &a, &config).unwrap(),
    ];
    for (j, p) in joint.iter().zip(&pairwise) {
        assert_eq!(j.forward_stack, p.forward_stack);
    }
}

#[test]
fn rejects_mismatched_or_constant_inputs() {
    let g = GridGeometry::with_shape([24; 3]).unwrap();
    let h = GridGeometry::with_shape([20; 3]).unwrap();
    let img = blobs(g, [0.0; 3]);
    assert!(register_pair(&img, &blobs(h, [0.0; 3]), &quick(2)).is_err());
    assert!(register_pair(&img, &ScalarVolume::filled(g, 1.0), &quick(2)).is_err());
}
