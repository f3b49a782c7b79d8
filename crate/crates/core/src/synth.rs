//! Synthetic benchmark cases: blob phantoms with labels and landmarks, known
//! diffeomorphic deformations, contrast remaps and augmentations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bspline::{BSplineField, INVERTIBILITY_FACTOR};
use crate::deformation::{apply_warp, invert_fixed_point, warp_labels};
use crate::metrics::LandmarkSet;
use crate::volume::{
    foreground_mask, gaussian_blur, sample_vector, GridGeometry, LabelVolume, MaskVolume, ScalarVolume, Vec3,
    VectorField, DEFAULT_MASK_QUANTILE,
};
use crate::{Error, Result};

pub const GT_CONTROL_SPACING: usize = 8;
pub const GT_AMPLITUDE: f64 = 0.55;
pub const GT_GAIN: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Contrast {
    Identity,
    Inverted,
    Gamma { gamma: f64 },
    MonotoneLut { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub blob_count: usize,
    pub seed: u64,
    pub deformation_max: f64,
    pub contrast: Contrast,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { shape: [48; 3], blob_count: 8, seed: 0, deformation_max: 3.0, contrast: Contrast::Identity, noise_sigma: 0.0 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        GridGeometry::with_shape(self.shape)?;
        if self.blob_count == 0 || self.blob_count > u16::MAX as usize {
            return Err(Error::InvalidParameter("blob count must be positive".into()));
        }
        let limit = INVERTIBILITY_FACTOR * GT_CONTROL_SPACING as f64;
        if !(0.0..=limit).contains(&self.deformation_max) {
            return Err(Error::InvalidParameter(format!("deformation_max must lie in [0, {limit}]")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise sigma must be nonnegative".into()));
        }
        if let Contrast::Gamma { gamma } = self.contrast {
            if !(gamma > 0.0) {
                return Err(Error::InvalidParameter("gamma must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: ScalarVolume,
    pub labels: LabelVolume,
    pub landmarks: LandmarkSet,
}

#[derive(Clone, Debug)]
pub struct BenchCase {
    pub spec: PhantomSpec,
    pub fixed: ScalarVolume,
    pub moving: ScalarVolume,
    /// `moving(x) = base(x + gt_field(x))`.
    pub gt_field: BSplineField,
    pub labels_fixed: LabelVolume,
    pub labels_moving: LabelVolume,
    pub landmarks_fixed: LandmarkSet,
    pub landmarks_moving: LandmarkSet,
    pub mask: MaskVolume,
}

impl BenchCase {
    /// Dense field mapping fixed points to their moving partners, the
    /// inverse of the ground truth.
    pub fn true_forward(&self) -> Result<VectorField> {
        invert_fixed_point(&self.gt_field.to_dense(), 1e-8, 200)
    }
}

fn smoothstep_profile(d: f64) -> f64 {
    const INNER: f64 = 0.6;
    const OUTER: f64 = 1.3;
    if d <= INNER {
        1.0
    } else if d >= OUTER {
        0.0
    } else {
        let t = (OUTER - d) / (OUTER - INNER);
        t * t * (3.0 - 2.0 * t)
    }
}

struct Blob {
    center: Vec3,
    radii: Vec3,
    intensity: f64,
}

/// Flat-topped anisotropic blobs summed into an image normalised to [0, 1];
/// each voxel is labelled by its dominant blob where that blob exceeds 1/2.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let g = GridGeometry::with_shape(spec.shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut levels: Vec<f64> = (0..spec.blob_count).map(|k| 0.3 + 0.7 * (k + 1) as f64 / spec.blob_count as f64).collect();
    levels.shuffle(&mut rng);
    let blobs: Vec<Blob> = levels
        .into_iter()
        .map(|intensity| {
            let center = std::array::from_fn(|a| {
                let n = (spec.shape[a] - 1) as f64;
                rng.random_range(0.25 * n..=0.75 * n)
            });
            let radii = std::array::from_fn(|a| {
                let n = spec.shape[a] as f64;
                rng.random_range(0.13 * n..=0.26 * n)
            });
            Blob { center, radii, intensity }
        })
        .collect();
    let mut image = vec![0.0; g.len()];
    let mut labels = vec![0u16; g.len()];
    for (idx, (v, l)) in image.iter_mut().zip(labels.iter_mut()).enumerate() {
        let p = g.coords(idx);
        let mut best = 0.5;
        for (k, b) in blobs.iter().enumerate() {
            let d = (0..3).map(|a| ((p[a] as f64 - b.center[a]) / b.radii[a]).powi(2)).sum::<f64>().sqrt();
            let s = smoothstep_profile(d);
            *v += s * b.intensity;
            if s > best {
                best = s;
                *l = k as u16 + 1;
            }
        }
    }
    let hi = image.iter().cloned().fold(0.0, f64::max);
    if hi > 0.0 {
        image.iter_mut().for_each(|v| *v /= hi);
    }
    let landmarks = LandmarkSet::new((0..blobs.len()).map(|k| format!("blob{k}")).collect(), blobs.iter().map(|b| b.center).collect())?;
    Ok(Phantom {
        image: ScalarVolume { geometry: g, data: image },
        labels: LabelVolume { geometry: g, data: labels },
        landmarks,
    })
}

/// Independent uniform coefficients in `[-m, m]`, `m = min(max_displacement, 0.4 * spacing)`.
pub fn random_diffeomorphism(
    geometry: GridGeometry,
    max_displacement: f64,
    control_spacing: usize,
    seed: u64,
) -> Result<BSplineField> {
    if !(max_displacement >= 0.0) {
        return Err(Error::InvalidParameter("max displacement must be nonnegative".into()));
    }
    let zero = BSplineField::zeros(geometry, control_spacing)?;
    let m = max_displacement.min(zero.bound);
    if m == 0.0 {
        return Ok(zero);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefs = (0..zero.control_count()).map(|_| [0; 3].map(|_| rng.random_range(-m..=m))).collect();
    zero.with_coefficients(coefs)
}

/// Spatially correlated coefficients: a few random low-frequency modes per
/// component evaluated at the control points, normalised by their RMS and
/// saturated through `GT_AMPLITUDE * m * tanh(GT_GAIN * s)`, so that every
/// coefficient stays within `m = min(max_displacement, 0.4 * spacing)`.
pub fn smooth_random_diffeomorphism(
    geometry: GridGeometry,
    max_displacement: f64,
    control_spacing: usize,
    seed: u64,
) -> Result<BSplineField> {
    if !(max_displacement >= 0.0) {
        return Err(Error::InvalidParameter("max displacement must be nonnegative".into()));
    }
    let zero = BSplineField::zeros(geometry, control_spacing)?;
    let m = max_displacement.min(zero.bound);
    if m == 0.0 {
        return Ok(zero);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const MODES: usize = 4;
    let modes: Vec<[(Vec3, f64, f64); MODES]> = (0..3)
        .map(|_| {
            std::array::from_fn(|_| {
                let freq = [0; 3].map(|_| rng.random_range(0.5..1.5) * std::f64::consts::PI);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.5..1.0);
                (freq, phase, amp)
            })
        })
        .collect();
    let cs = zero.control_shape;
    let mut coefs = vec![[0.0; 3]; zero.control_count()];
    for a in 0..cs[0] {
        for b in 0..cs[1] {
            for c in 0..cs[2] {
                let t = [a as f64 / (cs[0] - 1) as f64, b as f64 / (cs[1] - 1) as f64, c as f64 / (cs[2] - 1) as f64];
                let idx = zero.control_index(a, b, c);
                for comp in 0..3 {
                    coefs[idx][comp] = modes[comp]
                        .iter()
                        .map(|(f, ph, amp)| amp * (f[0] * t[0] + f[1] * t[1] + f[2] * t[2] + ph).cos())
                        .sum();
                }
            }
        }
    }
    for comp in 0..3 {
        let rms = (coefs.iter().map(|c| c[comp] * c[comp]).sum::<f64>() / coefs.len() as f64).sqrt();
        for c in coefs.iter_mut() {
            c[comp] = if rms > 0.0 { (GT_AMPLITUDE * m * (GT_GAIN * c[comp] / rms).tanh()).clamp(-m, m) } else { 0.0 };
        }
    }
    zero.with_coefficients(coefs)
}

fn normalise(img: &ScalarVolume, mask: &MaskVolume) -> Result<ScalarVolume> {
    img.geometry.ensure_same(&mask.geometry, "contrast mask")?;
    let (lo, hi) = img
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, m)| **m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(Error::DegenerateIntensity);
    }
    Ok(img.map(|v| (v - lo) / (hi - lo)))
}

fn lut_knots(seed: u64) -> [f64; 8] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut knots = [0.0; 8];
    for k in 1..8 {
        knots[k] = knots[k - 1] + rng.random_range(0.2..1.0);
    }
    let top = knots[7];
    knots.map(|y| y / top)
}

fn apply_lut(knots: &[f64; 8], v: f64) -> f64 {
    let seg = (v * 7.0).floor().clamp(0.0, 6.0) as usize;
    let t = v * 7.0 - seg as f64;
    knots[seg] + (knots[seg + 1] - knots[seg]) * t
}

/// Normalise to [0, 1] over `mask` (the same affine map applies outside),
/// then remap. `Identity` returns the input unchanged.
pub fn contrast_remap(img: &ScalarVolume, contrast: Contrast, mask: &MaskVolume) -> Result<ScalarVolume> {
    if let Contrast::Gamma { gamma } = contrast {
        if !(gamma > 0.0) {
            return Err(Error::InvalidParameter("gamma must be positive".into()));
        }
    }
    if contrast == Contrast::Identity {
        return Ok(img.clone());
    }
    let v = normalise(img, mask)?;
    Ok(match contrast {
        Contrast::Identity => v,
        Contrast::Inverted => v.map(|x| 1.0 - x),
        Contrast::Gamma { gamma } => v.map(|x| x.max(0.0).powf(gamma)),
        Contrast::MonotoneLut { seed } => {
            let knots = lut_knots(seed);
            v.map(|x| apply_lut(&knots, x))
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum Augmentation {
    Noise { sigma: f64 },
    Blur { sigma: f64 },
    SignInversion,
    Gamma { gamma: f64 },
}

/// Apply the operations in order. Sign inversion reflects about the mean
/// over `mask`; gamma acts on the min-max normalised values over `mask` and
/// maps back to the original range.
pub fn augment(img: &ScalarVolume, ops: &[Augmentation], mask: &MaskVolume, seed: u64) -> Result<ScalarVolume> {
    img.geometry.ensure_same(&mask.geometry, "augment mask")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for op in ops {
        out = match *op {
            Augmentation::Noise { sigma } => {
                let normal =
                    Normal::new(0.0, sigma).map_err(|_| Error::InvalidParameter("noise sigma must be nonnegative".into()))?;
                ScalarVolume { geometry: out.geometry, data: out.data.iter().map(|v| v + normal.sample(&mut rng)).collect() }
            }
            Augmentation::Blur { sigma } => gaussian_blur(&out, sigma)?,
            Augmentation::SignInversion => {
                let count = mask.count();
                if count == 0 {
                    return Err(Error::EmptyMask);
                }
                let mean =
                    out.data.iter().zip(&mask.data).filter(|(_, m)| **m).map(|(v, _)| v).sum::<f64>() / count as f64;
                out.map(|v| 2.0 * mean - v)
            }
            Augmentation::Gamma { gamma } => {
                if !(gamma > 0.0) {
                    return Err(Error::InvalidParameter("gamma must be positive".into()));
                }
                let (lo, hi) = out
                    .data
                    .iter()
                    .zip(&mask.data)
                    .filter(|(_, m)| **m)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
                if !(hi > lo) {
                    return Err(Error::DegenerateIntensity);
                }
                out.map(|v| lo + (hi - lo) * ((v - lo) / (hi - lo)).max(0.0).powf(gamma))
            }
        };
    }
    Ok(out)
}

/// Solve `y + u(y) = p` by fixed-point iteration.
fn preimage(u: &VectorField, p: Vec3) -> Vec3 {
    let mut y = p;
    for _ in 0..200 {
        let d = sample_vector(&u.data, u.geometry.shape, y);
        let next = [p[0] - d[0], p[1] - d[1], p[2] - d[2]];
        let step = (0..3).fold(0.0f64, |m, a| m.max((next[a] - y[a]).abs()));
        y = next;
        if step < 1e-12 {
            break;
        }
    }
    y
}

pub fn make_case(spec: &PhantomSpec) -> Result<BenchCase> {
    let phantom = make_phantom(spec)?;
    let g = phantom.image.geometry;
    let gt_field = smooth_random_diffeomorphism(g, spec.deformation_max, GT_CONTROL_SPACING, spec.seed ^ 0x5eed)?;
    let dense = gt_field.to_dense();
    let mask = foreground_mask(&phantom.image, DEFAULT_MASK_QUANTILE)?;
    let warped = apply_warp(&phantom.image, &dense)?;
    let mut moving = contrast_remap(&warped, spec.contrast, &mask)?;
    if spec.noise_sigma > 0.0 {
        moving = augment(&moving, &[Augmentation::Noise { sigma: spec.noise_sigma }], &mask, spec.seed ^ 0x4015e)?;
    }
    let labels_moving = warp_labels(&phantom.labels, &dense)?;
    let moved_points = phantom.landmarks.points.iter().map(|&p| preimage(&dense, p)).collect();
    let landmarks_moving = LandmarkSet::new(phantom.landmarks.identifiers.clone(), moved_points)?;
    Ok(BenchCase {
        spec: spec.clone(),
        fixed: phantom.image,
        moving,
        gt_field,
        labels_fixed: phantom.labels,
        labels_moving,
        landmarks_fixed: phantom.landmarks,
        landmarks_moving,
        mask,
    })
}
