//! JSON records: registration results with their stage structure, landmark
//! sets and synthetic case manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bspline::BSplineField;
use crate::deformation::StageStack;
use crate::engine::RegistrationResult;
use crate::io::nifti::{write_volume, VolumeData};
use crate::losses::LossReport;
use crate::metrics::LandmarkSet;
use crate::synth::{BenchCase, PhantomSpec};
use crate::volume::LabelVolume;
use crate::{Error, Result};

pub const RESULT_FORMAT: &str = "mindreg-result";
pub const CASE_FORMAT: &str = "mindreg-case";
pub const FORMAT_VERSION: u32 = 1;

/// Stage structure and optimisation trace of a registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub format: String,
    pub version: u32,
    pub stages: Vec<BSplineField>,
    pub loss_history: Vec<LossReport>,
    pub converged_flags: Vec<bool>,
}

impl ResultRecord {
    pub fn from_result(result: &RegistrationResult) -> Self {
        Self {
            format: RESULT_FORMAT.into(),
            version: FORMAT_VERSION,
            stages: result.forward_stack.stages.clone(),
            loss_history: result.loss_history.clone(),
            converged_flags: result.converged_flags.clone(),
        }
    }

    /// Validated stage stack; every stage must match its declared control
    /// grid and respect its bound.
    pub fn stack(&self) -> Result<StageStack> {
        if self.format != RESULT_FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::StructureMismatch(format!("unknown record {} v{}", self.format, self.version)));
        }
        let mut stack = StageStack::new();
        for stage in &self.stages {
            let template = BSplineField::zeros(stage.image_geometry, stage.control_spacing)?;
            if template.control_shape != stage.control_shape || template.bound != stage.bound {
                return Err(Error::StructureMismatch("stage control grid inconsistent with its spacing".into()));
            }
            stack.push(template.with_coefficients(stage.coefficients.clone())?)?;
        }
        Ok(stack)
    }

    pub fn into_result(self) -> Result<RegistrationResult> {
        let stack = self.stack()?;
        RegistrationResult::from_forward(stack, self.loss_history, self.converged_flags)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Metadata file stored next to a dense field: `field.nii` -> `field.nii.json`.
pub fn sidecar_path(field_path: &Path) -> PathBuf {
    let mut s = field_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Dense forward field plus its stage sidecar.
pub fn write_result(result: &RegistrationResult, field_path: &Path) -> Result<()> {
    write_volume(&VolumeData::Vector(result.forward_dense()?), field_path)?;
    write_json(&ResultRecord::from_result(result), &sidecar_path(field_path))
}

/// Reads the sidecar of a dense field written by [`write_result`].
pub fn read_result(field_path: &Path) -> Result<RegistrationResult> {
    let record: ResultRecord = read_json(&sidecar_path(field_path))?;
    record.into_result()
}

pub fn write_landmarks(lm: &LandmarkSet, path: &Path) -> Result<()> {
    write_json(lm, path)
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let lm: LandmarkSet = read_json(path)?;
    LandmarkSet::new(lm.identifiers, lm.points)
}

/// A synthetic case on disk. Paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub format: String,
    pub version: u32,
    pub spec: PhantomSpec,
    pub seed: u64,
    pub files: BTreeMap<String, String>,
    pub landmarks_fixed: LandmarkSet,
    pub landmarks_moving: LandmarkSet,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl CaseManifest {
    pub fn path_of(&self, dir: &Path, key: &str) -> Result<PathBuf> {
        let rel = self.files.get(key).ok_or_else(|| Error::StructureMismatch(format!("manifest lacks {key}")))?;
        Ok(dir.join(rel))
    }

    /// Parses a manifest and checks that every listed file exists.
    pub fn read(path: &Path) -> Result<Self> {
        let m: CaseManifest = read_json(path)?;
        if m.format != CASE_FORMAT || m.version != FORMAT_VERSION {
            return Err(Error::StructureMismatch(format!("unknown manifest {} v{}", m.format, m.version)));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        for rel in m.files.values() {
            if !dir.join(rel).is_file() {
                return Err(Error::StructureMismatch(format!("missing case file {rel}")));
            }
        }
        LandmarkSet::new(m.landmarks_fixed.identifiers.clone(), m.landmarks_fixed.points.clone())?;
        LandmarkSet::new(m.landmarks_moving.identifiers.clone(), m.landmarks_moving.points.clone())?;
        Ok(m)
    }
}

/// Writes every volume of a case, its landmarks and a manifest into `dir`.
pub fn write_case(case: &BenchCase, dir: &Path) -> Result<CaseManifest> {
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    let mut put = |key: &str, name: &str, value: VolumeData| -> Result<()> {
        write_volume(&value, &dir.join(name))?;
        files.insert(key.to_string(), name.to_string());
        Ok(())
    };
    put("fixed", "fixed.nii", VolumeData::Scalar(case.fixed.clone()))?;
    put("moving", "moving.nii", VolumeData::Scalar(case.moving.clone()))?;
    put("labels_fixed", "labels_fixed.nii", VolumeData::Labels(case.labels_fixed.clone()))?;
    put("labels_moving", "labels_moving.nii", VolumeData::Labels(case.labels_moving.clone()))?;
    let mask = LabelVolume { geometry: case.mask.geometry, data: case.mask.data.iter().map(|&b| b as u16).collect() };
    put("mask", "mask.nii", VolumeData::Labels(mask))?;
    put("gt_field", "gt_field.nii", VolumeData::Vector(case.gt_field.to_dense()))?;
    put("true_forward", "true_forward.nii", VolumeData::Vector(case.true_forward()?))?;
    write_json(&case.gt_field, &sidecar_path(&dir.join("gt_field.nii")))?;
    write_landmarks(&case.landmarks_fixed, &dir.join("landmarks_fixed.json"))?;
    write_landmarks(&case.landmarks_moving, &dir.join("landmarks_moving.json"))?;
    files.insert("landmarks_fixed".into(), "landmarks_fixed.json".into());
    files.insert("landmarks_moving".into(), "landmarks_moving.json".into());
    let manifest = CaseManifest {
        format: CASE_FORMAT.into(),
        version: FORMAT_VERSION,
        spec: case.spec.clone(),
        seed: case.spec.seed,
        files,
        landmarks_fixed: case.landmarks_fixed.clone(),
        landmarks_moving: case.landmarks_moving.clone(),
    };
    write_json(&manifest, &dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
