//! Run configuration, read from a TOML file.
//!
//! Every key is optional. Unknown keys are rejected with the list of valid
//! ones. Paths are taken relative to the directory holding the file.
//!
//! ```toml
//! atlas = "atlas.nii.gz"      # atlas volume; its manifest is atlas.txt beside it
//! seed = 0
//!
//! [model]
//! lambda = 0.05               # deformation stiffness
//! control_spacing = 10        # control-point spacing in working voxels
//!
//! [grid]
//! resolution = 0.5            # working resolution in mm
//!
//! [gem]
//! max_iter = 100
//! tol = 1e-6
//! deform = true
//! deform_every = 5
//! deform_iters = 20
//! init_kappa = 10.0
//!
//! [registration]
//! bins = 32
//! levels = 3
//!
//! [[classes]]                 # matched to atlas classes by name
//! name = "wm"
//! hypermean = [110.0]         # M_c
//! count = 500.0               # n_c; defaults to the class prior volume in mm³ when a hypermean is set
//! template = 110.0            # intensity of the class in the registration template
//!
//! [sharing]                   # group ids per atlas class; overrides the atlas manifest
//! gaussian = [0, 1, 1, 2]
//! beta = [0, 1, 2, 3]
//! dsw = [0, 1, 2, 3]
//!
//! [dti]
//! bval = 1000.0
//! shell_tol = 100.0
//! resample = 1.0              # optional log-Euclidean resampling resolution in mm
//!
//! [simulate]
//! grid = 32
//! classes = 4
//! [[simulate.truth]]          # optional, one entry per class
//! mean = [40.0]
//! cov = [[36.0]]
//! alpha = 2.0
//! beta = 8.0
//! axis = [0.0, 0.0, 1.0]
//! kappa = 8.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::atlas::{DEFAULT_CONTROL_SPACING, DEFAULT_STIFFNESS};
use crate::distributions::{BetaParams, DswParams, GaussianParams};
use crate::error::{Error, Result};
use crate::gem::{ClassParams, GemOptions};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub atlas: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub gem: GemConfig,
    pub registration: RegistrationConfig,
    pub classes: Vec<ClassConfig>,
    pub sharing: Option<SharingConfig>,
    pub dti: DtiConfig,
    pub simulate: SimulateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub lambda: f64,
    pub control_spacing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub resolution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GemConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub deform: bool,
    pub deform_every: usize,
    pub deform_iters: usize,
    pub init_kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub bins: usize,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub name: String,
    pub hypermean: Option<Vec<f64>>,
    pub count: Option<f64>,
    pub template: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingConfig {
    pub gaussian: Option<Vec<usize>>,
    pub beta: Option<Vec<usize>>,
    pub dsw: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtiConfig {
    pub bval: f64,
    pub shell_tol: f64,
    pub resample: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub grid: usize,
    pub classes: usize,
    pub truth: Option<Vec<TruthClass>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthClass {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub axis: [f64; 3],
    pub kappa: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_STIFFNESS,
            control_spacing: DEFAULT_CONTROL_SPACING,
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { resolution: 0.5 }
    }
}

impl Default for GemConfig {
    fn default() -> Self {
        let g = GemOptions::default();
        Self {
            max_iter: g.max_iter,
            tol: g.tol,
            deform: g.deform,
            deform_every: g.deform_every,
            deform_iters: g.deform_iters,
            init_kappa: g.init_kappa,
        }
    }
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self { bins: 32, levels: 3 }
    }
}

impl Default for DtiConfig {
    fn default() -> Self {
        Self {
            bval: 1000.0,
            shell_tol: 100.0,
            resample: None,
        }
    }
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            classes: 4,
            truth: None,
        }
    }
}

impl RunConfig {
    /// Parses configuration text; `base` resolves relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(a) = &cfg.atlas {
            if a.is_relative() {
                cfg.atlas = Some(base.join(a));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.model.lambda >= 0.0 && self.model.lambda.is_finite()) {
            return bad(format!("model.lambda must be nonnegative, got {}", self.model.lambda));
        }
        if self.model.control_spacing == 0 {
            return bad("model.control_spacing must be positive".into());
        }
        if !(self.grid.resolution > 0.0 && self.grid.resolution.is_finite()) {
            return bad(format!("grid.resolution must be positive, got {}", self.grid.resolution));
        }
        if self.gem.max_iter == 0 || self.gem.deform_every == 0 {
            return bad("gem.max_iter and gem.deform_every must be positive".into());
        }
        if !(self.gem.tol >= 0.0) || !(self.gem.init_kappa >= 0.0) {
            return bad("gem.tol and gem.init_kappa must be nonnegative".into());
        }
        if self.registration.bins < 8 || self.registration.levels == 0 {
            return bad("registration needs at least 8 bins and one level".into());
        }
        if self.dti.resample.is_some_and(|r| !(r > 0.0)) {
            return bad("dti.resample must be positive".into());
        }
        if self.simulate.classes == 0 || self.simulate.grid < 4 {
            return bad("simulate needs at least one class and a grid of 4 voxels".into());
        }
        for c in &self.classes {
            if c.count.is_some_and(|n| !(n >= 0.0 && n.is_finite())) {
                return bad(format!("class {}: count must be nonnegative", c.name));
            }
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("class {} listed twice", w[0]));
        }
        Ok(())
    }

    /// The atlas path, which `segment` cannot run without.
    pub fn require_atlas(&self) -> Result<&Path> {
        self.atlas
            .as_deref()
            .ok_or_else(|| Error::Config("missing atlas path (set `atlas` or pass --atlas)".into()))
    }

    pub fn class(&self, name: &str) -> Option<&ClassConfig> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn gem_options(&self) -> GemOptions {
        GemOptions {
            max_iter: self.gem.max_iter,
            tol: self.gem.tol,
            deform: self.gem.deform,
            deform_every: self.gem.deform_every,
            deform_iters: self.gem.deform_iters,
            control_spacing: self.model.control_spacing,
            stiffness: self.model.lambda,
            init_kappa: self.gem.init_kappa,
            ..GemOptions::default()
        }
    }

    /// Ground-truth parameters for `simulate`, if given.
    pub fn truth_params(&self) -> Result<Option<ClassParams>> {
        let Some(t) = &self.simulate.truth else {
            return Ok(None);
        };
        if t.len() != self.simulate.classes {
            return Err(Error::Config(format!(
                "simulate.truth has {} entries for {} classes",
                t.len(),
                self.simulate.classes
            )));
        }
        let mut g = Vec::new();
        let mut b = Vec::new();
        let mut d = Vec::new();
        for c in t {
            let dim = c.mean.len();
            if c.cov.len() != dim || c.cov.iter().any(|r| r.len() != dim) {
                return Err(Error::Config(format!("truth covariance must be {dim}x{dim}")));
            }
            let cov = DMatrix::from_fn(dim, dim, |i, j| c.cov[i][j]);
            g.push(GaussianParams::new(DVector::from_vec(c.mean.clone()), cov).map_err(to_config)?);
            b.push(BetaParams::new(c.alpha, c.beta).map_err(to_config)?);
            let axis = Vector3::from(c.axis);
            let n = axis.norm();
            if !(n > 0.0) {
                return Err(Error::Config("truth axis must be nonzero".into()));
            }
            d.push(DswParams::new(axis / n, c.kappa).map_err(to_config)?);
        }
        ClassParams::new(g, b, d).map(Some).map_err(to_config)
    }
}

fn to_config(e: Error) -> Error {
    Error::Config(e.to_string())
}

/// Reads and validates a configuration file.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    RunConfig::parse(&text, base).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
