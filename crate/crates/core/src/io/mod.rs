//! File formats: NIfTI-1 volumes and JSON manifests.

pub mod manifest;
pub mod nifti;
