//! Generalized EM over the joint structural/diffusion model.

mod engine;
mod estep;
mod mstep;

pub use engine::{expected_volumes, hard_segmentation, run_gem, GemInputs, GemOptions, GemResult};
pub use estep::{e_step, ClassTerms};
pub use mstep::{
    beta_objective, gaussian_q, kappa_objective, m_step_beta, m_step_gaussian, m_step_kappa, m_step_psi,
    BetaStats, GaussianStats, KappaStats, COV_FLOOR,
};

use nalgebra::{DVector, Vector3};

use crate::distributions::{BetaParams, DswParams, GaussianParams, NiwHyper, FA_CLAMP, UNIT_TOL};
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Per-voxel FA and principal direction on the working grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionFeatures {
    fa: Volume,
    dirs: Volume,
}

impl DiffusionFeatures {
    pub fn new(fa: Volume, dirs: Volume) -> Result<Self> {
        if fa.channels() != 1 || dirs.channels() != 3 {
            return Err(Error::Data(format!(
                "expected 1 FA channel and 3 direction channels, got {} and {}",
                fa.channels(),
                dirs.channels()
            )));
        }
        if !fa.grid().same_geometry(dirs.grid(), 1e-6) {
            return Err(Error::Config("FA and direction volumes are on different grids".into()));
        }
        for (i, (&f, d)) in fa.data().iter().zip(dirs.data().chunks(3)).enumerate() {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Data(format!("FA {f} outside [0, 1] at voxel {i}")));
            }
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if f > 0.0 && (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Data(format!("direction at voxel {i} has norm {n}")));
            }
        }
        Ok(Self { fa, dirs })
    }

    pub fn fa(&self) -> &Volume {
        &self.fa
    }

    pub fn dirs(&self) -> &Volume {
        &self.dirs
    }
}

/// Observations at the voxels taking part in the fit, packed for the inner loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    dim: usize,
    s: Vec<f64>,
    f: Vec<f64>,
    ln_f: Vec<f64>,
    ln_1mf: Vec<f64>,
    phi: Vec<Vector3<f64>>,
}

impl Observations {
    /// `s` is row-major `V x dim`.
    pub fn new(dim: usize, s: Vec<f64>, f: Vec<f64>, phi: Vec<Vector3<f64>>) -> Result<Self> {
        let v = f.len();
        if dim == 0 || s.len() != v * dim || phi.len() != v {
            return Err(Error::Data("inconsistent observation lengths".into()));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite intensity".into()));
        }
        let mut ln_f = Vec::with_capacity(v);
        let mut ln_1mf = Vec::with_capacity(v);
        for (i, &x) in f.iter().enumerate() {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Data(format!("FA {x} outside [0, 1] at sample {i}")));
            }
            if x >= FA_CLAMP && (phi[i].norm() - 1.0).abs() > UNIT_TOL {
                return Err(Error::Data(format!("direction at sample {i} is not a unit vector")));
            }
            let c = x.clamp(FA_CLAMP, 1.0 - FA_CLAMP);
            ln_f.push(c.ln());
            ln_1mf.push((1.0 - c).ln());
        }
        Ok(Self {
            dim,
            s,
            f,
            ln_f,
            ln_1mf,
            phi,
        })
    }

    /// Extracts the listed voxels from working-grid volumes.
    pub fn gather(s: &Volume, d: &DiffusionFeatures, voxels: &[usize]) -> Result<Self> {
        if !s.grid().same_geometry(d.fa().grid(), 1e-6) {
            return Err(Error::Config("structural and diffusion volumes are on different grids".into()));
        }
        let dim = s.channels();
        let mut sv = Vec::with_capacity(voxels.len() * dim);
        let mut f = Vec::with_capacity(voxels.len());
        let mut phi = Vec::with_capacity(voxels.len());
        for &i in voxels {
            sv.extend_from_slice(s.voxel(i));
            f.push(d.fa().data()[i]);
            let p = d.dirs().voxel(i);
            phi.push(Vector3::new(p[0], p[1], p[2]));
        }
        Self::new(dim, sv, f, phi)
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn intensity(&self, v: usize) -> &[f64] {
        &self.s[v * self.dim..(v + 1) * self.dim]
    }

    pub fn fa(&self, v: usize) -> f64 {
        self.f[v]
    }

    pub fn dir(&self, v: usize) -> &Vector3<f64> {
        &self.phi[v]
    }

    /// Whether the direction at `v` enters the likelihood.
    pub fn has_direction(&self, v: usize) -> bool {
        self.f[v] >= FA_CLAMP
    }

    /// Unweighted per-channel variance of the intensities.
    pub fn intensity_variance(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim)
            .map(|d| {
                let mean = (0..self.len()).map(|v| self.s[v * self.dim + d]).sum::<f64>() / n;
                (0..self.len()).map(|v| (self.s[v * self.dim + d] - mean).powi(2)).sum::<f64>() / n
            })
            .collect()
    }
}

/// Soft segmentation, row-major `V x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    classes: usize,
    w: Vec<f64>,
}

impl Responsibilities {
    pub fn new(classes: usize, w: Vec<f64>) -> Result<Self> {
        if classes == 0 || !w.len().is_multiple_of(classes) {
            return Err(Error::Data("responsibility matrix has a ragged shape".into()));
        }
        for (v, row) in w.chunks(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 || row.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Data(format!("responsibilities at voxel {v} are not a distribution")));
            }
        }
        Ok(Self { classes, w })
    }

    pub(crate) fn new_unchecked(classes: usize, w: Vec<f64>) -> Self {
        Self { classes, w }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn num_voxels(&self) -> usize {
        self.w.len() / self.classes
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.w[v * self.classes..(v + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassParams {
    pub gaussian: Vec<GaussianParams>,
    pub beta: Vec<BetaParams>,
    pub dsw: Vec<DswParams>,
}

impl ClassParams {
    pub fn new(gaussian: Vec<GaussianParams>, beta: Vec<BetaParams>, dsw: Vec<DswParams>) -> Result<Self> {
        if gaussian.is_empty() || gaussian.len() != beta.len() || beta.len() != dsw.len() {
            return Err(Error::Config("per-class parameter lists differ in length".into()));
        }
        let d = gaussian[0].dim();
        if gaussian.iter().any(|g| g.dim() != d) {
            return Err(Error::Config("Gaussian dimensions differ between classes".into()));
        }
        Ok(Self { gaussian, beta, dsw })
    }

    pub fn num_classes(&self) -> usize {
        self.gaussian.len()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            gaussian: perm.iter().map(|&k| self.gaussian[k].clone()).collect(),
            beta: perm.iter().map(|&k| self.beta[k]).collect(),
            dsw: perm.iter().map(|&k| self.dsw[k]).collect(),
        }
    }
}

/// Which classes share each family of likelihood parameters. Group ids are
/// arbitrary labels; two classes share parameters when their ids are equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharingGroups {
    gaussian: Vec<usize>,
    beta: Vec<usize>,
    dsw: Vec<usize>,
}

impl SharingGroups {
    pub fn new(gaussian: Vec<usize>, beta: Vec<usize>, dsw: Vec<usize>) -> Result<Self> {
        if gaussian.is_empty() || gaussian.len() != beta.len() || beta.len() != dsw.len() {
            return Err(Error::Config("sharing maps must list every class once".into()));
        }
        Ok(Self { gaussian, beta, dsw })
    }

    /// Every class has its own parameters.
    pub fn independent(classes: usize) -> Self {
        let ids: Vec<usize> = (0..classes).collect();
        Self {
            gaussian: ids.clone(),
            beta: ids.clone(),
            dsw: ids,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.gaussian.len()
    }

    pub fn gaussian_groups(&self) -> Vec<Vec<usize>> {
        groups_of(&self.gaussian)
    }

    pub fn beta_groups(&self) -> Vec<Vec<usize>> {
        groups_of(&self.beta)
    }

    pub fn dsw_groups(&self) -> Vec<Vec<usize>> {
        groups_of(&self.dsw)
    }

    pub fn gaussian_map(&self) -> &[usize] {
        &self.gaussian
    }

    pub fn beta_map(&self) -> &[usize] {
        &self.beta
    }

    pub fn dsw_map(&self) -> &[usize] {
        &self.dsw
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            gaussian: perm.iter().map(|&k| self.gaussian[k]).collect(),
            beta: perm.iter().map(|&k| self.beta[k]).collect(),
            dsw: perm.iter().map(|&k| self.dsw[k]).collect(),
        }
    }
}

/// Members of each group, groups ordered by their first member.
fn groups_of(map: &[usize]) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = Vec::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (c, &g) in map.iter().enumerate() {
        match ids.iter().position(|&x| x == g) {
            Some(i) => out[i].push(c),
            None => {
                ids.push(g);
                out.push(vec![c]);
            }
        }
    }
    out
}

/// Per-class NIW hyperparameters for the structural Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub niw: Vec<NiwHyper>,
}

impl Hyperparams {
    pub fn new(niw: Vec<NiwHyper>) -> Result<Self> {
        if niw.is_empty() {
            return Err(Error::Config("no hyperparameters given".into()));
        }
        let d = niw[0].mean.len();
        if niw.iter().any(|h| h.mean.len() != d) {
            return Err(Error::Config("hypermeans differ in dimension".into()));
        }
        Ok(Self { niw })
    }

    pub fn flat(classes: usize, dim: usize) -> Self {
        Self {
            niw: vec![NiwHyper::flat(dim); classes],
        }
    }

    /// Scalar hypermeans `means[c]` with pseudo-counts `counts[c]`.
    pub fn scalar(means: &[f64], counts: &[f64]) -> Result<Self> {
        let niw = means
            .iter()
            .zip(counts)
            .map(|(&m, &n)| NiwHyper::new(DVector::from_element(1, m), n))
            .collect::<Result<Vec<_>>>()?;
        Self::new(niw)
    }

    pub fn num_classes(&self) -> usize {
        self.niw.len()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            niw: perm.iter().map(|&k| self.niw[k].clone()).collect(),
        }
    }
}
