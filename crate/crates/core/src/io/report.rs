//! Run reports and truth manifests, written as JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::gem::{ClassParams, GemResult};

/// Parameters of one class in plain arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub name: String,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub axis: [f64; 3],
    pub kappa: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub expected_volume_mm3: Option<f64>,
}

pub fn class_records(params: &ClassParams, names: &[String]) -> Vec<ClassRecord> {
    (0..params.num_classes())
        .map(|c| {
            let g = &params.gaussian[c];
            let d = g.dim();
            ClassRecord {
                name: names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
                mean: g.mean.iter().copied().collect(),
                cov: (0..d).map(|i| (0..d).map(|j| g.cov[(i, j)]).collect()).collect(),
                alpha: params.beta[c].alpha,
                beta: params.beta[c].beta,
                axis: params.dsw[c].axis.into(),
                kappa: params.dsw[c].kappa,
                expected_volume_mm3: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iterations: usize,
    pub converged: bool,
    pub bound_trace: Vec<f64>,
    pub classes: Vec<ClassRecord>,
    /// Volume of the fitted region; the expected volumes sum to it.
    pub masked_volume_mm3: f64,
    /// Subject world to atlas world, row-major.
    pub affine: [[f64; 4]; 4],
    /// Left out in deterministic mode so repeated runs give identical files.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
    pub config: RunConfig,
}

impl RunReport {
    pub fn new(
        result: &GemResult,
        names: &[String],
        voxel_volume: f64,
        affine: &nalgebra::Matrix4<f64>,
        config: &RunConfig,
        wall_time_s: Option<f64>,
    ) -> Self {
        let mut classes = class_records(&result.params, names);
        for (c, v) in classes.iter_mut().zip(&result.expected_volumes) {
            c.expected_volume_mm3 = Some(*v);
        }
        Self {
            iterations: result.iterations,
            converged: result.converged,
            bound_trace: result.bound_trace.clone(),
            classes,
            masked_volume_mm3: result.mask.len() as f64 * voxel_volume,
            affine: std::array::from_fn(|r| std::array::from_fn(|c| affine[(r, c)])),
            wall_time_s,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub seed: u64,
    pub classes: Vec<ClassRecord>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::default_truth;

    #[test]
    fn truth_manifest_round_trip_is_exact() {
        let p = default_truth(4);
        let names: Vec<String> = (0..4).map(|k| format!("c{k}")).collect();
        let m = TruthManifest {
            seed: 7,
            classes: class_records(&p, &names),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        write_json(&m, &path).unwrap();
        let back: TruthManifest = read_json(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.classes[3].axis, <[f64; 3]>::from(p.dsw[3].axis));
    }
}
