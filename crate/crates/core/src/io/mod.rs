//! File formats: NIfTI-1 volumes, run configuration, affines, atlas
//! manifests, reports.

pub mod config;
pub mod nifti;
pub mod report;
pub mod text;

pub use config::{read_config, RunConfig};
pub use nifti::{read_header, read_nifti, write_nifti, NiftiDatatype, NiftiHeader};
pub use report::{read_json, write_json, ClassRecord, RunReport, TruthManifest};
pub use text::{manifest_path, read_affine, read_atlas, write_affine, AtlasManifest};
