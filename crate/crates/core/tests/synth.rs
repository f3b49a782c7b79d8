use mindreg::deformation::non_diffeomorphic_volume;
use mindreg::losses::{lncc, multichannel_lncc};
use mindreg::metrics::tre;
use mindreg::mind::{mind_transform, MindParams};
use mindreg::synth::*;
use mindreg::volume::{GridGeometry, VectorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(seed: u64) -> PhantomSpec {
    PhantomSpec { seed, ..PhantomSpec::default() }
}

fn small(seed: u64) -> PhantomSpec {
    PhantomSpec { shape: [24; 3], seed, ..PhantomSpec::default() }
}

#[test]
fn phantom_is_deterministic_per_seed() {
    let a = make_phantom(&small(4)).unwrap();
    let b = make_phantom(&small(4)).unwrap();
    let c = make_phantom(&small(5)).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.landmarks, b.landmarks);
    assert_ne!(a.image, c.image);
}

#[test]
fn single_blob_has_two_labels() {
    for seed in 0..5 {
        let p = make_phantom(&PhantomSpec { blob_count: 1, ..small(seed) }).unwrap();
        let mut values = p.labels.data.clone();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values, vec![0, 1]);
        assert_eq!(p.landmarks.len(), 1);
    }
}

#[test]
fn default_foreground_fraction_envelope() {
    for seed in 0..10 {
        let p = make_phantom(&spec(seed)).unwrap();
        let fg = p.labels.data.iter().filter(|&&l| l != 0).count() as f64 / p.labels.data.len() as f64;
        assert!((0.10..=0.60).contains(&fg), "seed {seed}: foreground {fg}");
    }
}

#[test]
fn ground_truth_fields_never_fold() {
    let g = GridGeometry::with_shape([32; 3]).unwrap();
    for seed in 0..10 {
        let s = smooth_random_diffeomorphism(g, 3.0, 8, seed).unwrap();
        assert!(s.max_abs_coefficient() <= 3.0);
        assert_eq!(non_diffeomorphic_volume(&s.to_dense()), 0.0);
        let r = random_diffeomorphism(g, 10.0, 8, seed).unwrap();
        assert!(r.max_abs_coefficient() <= r.bound);
        assert_eq!(non_diffeomorphic_volume(&r.to_dense()), 0.0);
    }
}

#[test]
fn random_field_displacement_within_partition_of_unity_bound() {
    let g = GridGeometry::with_shape([20; 3]).unwrap();
    for seed in 0..5 {
        let f = random_diffeomorphism(g, 1.5, 5, seed).unwrap();
        let dense = f.to_dense();
        for v in &dense.data {
            assert!(v.iter().all(|c| c.abs() <= 1.5 + 1e-12));
        }
    }
    assert!(random_diffeomorphism(g, 0.0, 5, 1).unwrap().coefficients.iter().all(|c| *c == [0.0; 3]));
}

#[test]
fn contrast_modes() {
    let case = make_case(&PhantomSpec { deformation_max: 0.0, ..small(2) }).unwrap();
    let img = &case.fixed;
    let mask = &case.mask;
    let once = contrast_remap(img, Contrast::Inverted, mask).unwrap();
    let twice = contrast_remap(&once, Contrast::Inverted, mask).unwrap();
    let norm = contrast_remap(img, Contrast::Gamma { gamma: 1.0 }, mask).unwrap();
    for (a, b) in twice.data.iter().zip(&norm.data) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(contrast_remap(img, Contrast::Gamma { gamma: 0.0 }, mask).is_err());
    assert_eq!(contrast_remap(img, Contrast::Identity, mask).unwrap(), *img);
    let lut = contrast_remap(img, Contrast::MonotoneLut { seed: 9 }, mask).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20000 {
        let (i, j) = (rng.random_range(0..img.data.len()), rng.random_range(0..img.data.len()));
        if norm.data[i] < norm.data[j] {
            assert!(lut.data[i] <= lut.data[j]);
        }
    }
}

#[test]
fn augmentations() {
    let case = make_case(&PhantomSpec { deformation_max: 0.0, ..spec(1) }).unwrap();
    let (img, mask) = (&case.fixed, &case.mask);
    assert_eq!(augment(img, &[], mask, 0).unwrap(), *img);
    let flip = [Augmentation::SignInversion];
    let back = augment(&augment(img, &flip, mask, 0).unwrap(), &flip, mask, 0).unwrap();
    for (a, b) in back.data.iter().zip(&img.data) {
        assert!((a - b).abs() < 1e-12);
    }
    let sigma = 0.2;
    let noisy = augment(img, &[Augmentation::Noise { sigma }], mask, 3).unwrap();
    let d: Vec<f64> = noisy.data.iter().zip(&img.data).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.1, "variance {var}");
    assert_eq!(noisy, augment(img, &[Augmentation::Noise { sigma }], mask, 3).unwrap());
}

#[test]
fn undeformed_identity_case_has_equal_images() {
    let case = make_case(&PhantomSpec { deformation_max: 0.0, ..small(7) }).unwrap();
    assert_eq!(case.fixed, case.moving);
    assert_eq!(case.labels_fixed, case.labels_moving);
}

#[test]
fn case_is_deterministic() {
    let a = make_case(&small(11)).unwrap();
    let b = make_case(&small(11)).unwrap();
    assert_eq!(a.moving, b.moving);
    assert_eq!(a.gt_field, b.gt_field);
    assert_eq!(a.landmarks_moving, b.landmarks_moving);
    assert_eq!(a.labels_moving, b.labels_moving);
}

#[test]
fn moving_landmarks_map_back_through_the_ground_truth() {
    for seed in 0..3 {
        let case = make_case(&spec(seed)).unwrap();
        for (p, q) in case.landmarks_fixed.points.iter().zip(&case.landmarks_moving.points) {
            let d = case.gt_field.eval(*q);
            let back: f64 = (0..3).map(|a| (q[a] + d[a] - p[a]).powi(2)).sum::<f64>().sqrt();
            assert!(back < 0.05, "seed {seed}: {back}");
        }
    }
}

#[test]
fn default_initial_landmark_error_envelope() {
    for seed in 0..10 {
        let case = make_case(&spec(seed)).unwrap();
        let zero = VectorField::zeros(case.fixed.geometry);
        let t = tre(&case.landmarks_fixed, &case.landmarks_moving, &zero, [1.0; 3]).unwrap().mean;
        assert!((1.5..=3.0).contains(&t), "seed {seed}: {t}");
    }
}

#[test]
fn inverted_contrast_defeats_raw_correlation_but_not_mind() {
    for seed in 0..3 {
        let case = make_case(&PhantomSpec { deformation_max: 0.0, contrast: Contrast::Inverted, ..spec(seed) }).unwrap();
        let raw = lncc(&case.fixed, &case.moving, &case.mask, 2).unwrap();
        let p = MindParams::default();
        let (a, b) = (mind_transform(&case.fixed, &p).unwrap(), mind_transform(&case.moving, &p).unwrap());
        let mind = multichannel_lncc(&a, &b, &case.mask, 2).unwrap();
        assert!(raw < -0.5, "seed {seed}: raw {raw}");
        assert!(mind > 0.8, "seed {seed}: mind {mind}");
    }
}
