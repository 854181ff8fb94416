use nalgebra::{Matrix4, Vector3};

use super::{
    e_step, m_step_beta, m_step_gaussian, m_step_kappa, m_step_psi, ClassParams, DiffusionFeatures, Hyperparams,
    Observations, Responsibilities, SharingGroups,
};
use crate::atlas::{bending_energy, AtlasWarp, DeformationField, ProbAtlas, DEFAULT_CONTROL_SPACING, DEFAULT_STIFFNESS};
use crate::distributions::DswParams;
use crate::error::{Error, Result};
use crate::optim::{minimize_cg, CgOptions};
use crate::par::{sum_unordered, Reduction};
use crate::volume::Volume;

/// Voxels whose foreground atlas mass is at or below this are left out of the fit.
const MASK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GemOptions {
    pub max_iter: usize,
    /// Relative change of the bound below which the loop stops.
    pub tol: f64,
    pub deform: bool,
    /// The deformation is updated on iterations that are multiples of this.
    pub deform_every: usize,
    pub deform_iters: usize,
    /// Control-point spacing in working voxels.
    pub control_spacing: usize,
    pub stiffness: f64,
    pub init_kappa: f64,
    pub reduction: Reduction,
}

impl Default for GemOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            deform: true,
            deform_every: 5,
            deform_iters: 20,
            control_spacing: DEFAULT_CONTROL_SPACING,
            stiffness: DEFAULT_STIFFNESS,
            init_kappa: 10.0,
            reduction: Reduction::Deterministic,
        }
    }
}

/// Everything the fit needs, already on a common working grid.
#[derive(Debug, Clone, Copy)]
pub struct GemInputs<'a> {
    pub structural: &'a Volume,
    pub diffusion: &'a DiffusionFeatures,
    pub atlas: &'a ProbAtlas,
    /// Subject world to atlas world.
    pub affine: &'a Matrix4<f64>,
    pub hyper: &'a Hyperparams,
    pub sharing: &'a SharingGroups,
}

#[derive(Debug, Clone)]
pub struct GemResult {
    pub params: ClassParams,
    /// Rows follow `mask`.
    pub responsibilities: Responsibilities,
    /// Working-grid indices of the fitted voxels.
    pub mask: Vec<usize>,
    /// Labels `1..=C` inside the mask, 0 elsewhere.
    pub labels: Volume,
    /// Per-class posterior maps, zero outside the mask.
    pub posteriors: Volume,
    /// Expected class volumes in mm³.
    pub expected_volumes: Vec<f64>,
    /// Bound after every E-step.
    pub bound_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub deformation: DeformationField,
}

/// Per-row argmax as 1-based labels; ties go to the lowest class.
pub fn hard_segmentation(resp: &Responsibilities) -> Vec<usize> {
    (0..resp.num_voxels())
        .map(|v| {
            let row = resp.row(v);
            let mut best = 0;
            for (c, &w) in row.iter().enumerate().skip(1) {
                if w > row[best] {
                    best = c;
                }
            }
            best + 1
        })
        .collect()
}

/// `voxel_volume · Σ_v w_vc` for every class.
pub fn expected_volumes(resp: &Responsibilities, voxel_volume: f64) -> Vec<f64> {
    let mut out = vec![0.0; resp.num_classes()];
    for v in 0..resp.num_voxels() {
        for (o, w) in out.iter_mut().zip(resp.row(v)) {
            *o += w;
        }
    }
    out.iter().map(|s| s * voxel_volume).collect()
}

fn check_inputs(inp: &GemInputs) -> Result<()> {
    let c = inp.atlas.num_classes();
    if !inp.structural.grid().same_geometry(inp.diffusion.fa().grid(), 1e-6) {
        return Err(Error::Config("structural and diffusion volumes are on different grids".into()));
    }
    if inp.hyper.num_classes() != c || inp.sharing.num_classes() != c {
        return Err(Error::Config(format!(
            "atlas has {c} classes but hyperparameters list {} and sharing maps {}",
            inp.hyper.num_classes(),
            inp.sharing.num_classes()
        )));
    }
    let d = inp.structural.channels();
    if inp.hyper.niw.iter().any(|h| h.mean.len() != d) {
        return Err(Error::Config(format!("hypermeans must have {d} components")));
    }
    Ok(())
}

/// Fits the model by generalized EM.
///
/// The responsibilities start at the deformed atlas. Each iteration updates
/// the Gaussians, Beta and Watson parameters (and, every `deform_every`
/// iterations, the deformation), then recomputes the responsibilities and
/// records the bound.
pub fn run_gem(inp: &GemInputs, opts: &GemOptions) -> Result<GemResult> {
    check_inputs(inp)?;
    if opts.deform_every == 0 {
        return Err(Error::Config("deformation interval must be positive".into()));
    }
    let grid = inp.structural.grid();
    let c = inp.atlas.num_classes();
    let mode = opts.reduction;
    let mut field = DeformationField::over_grid(grid, opts.control_spacing, opts.stiffness)?;

    let everything = AtlasWarp::new(grid, (0..grid.num_voxels()).collect(), inp.affine, inp.atlas.grid());
    let initial = everything.priors(inp.atlas, &field);
    let bg = inp.atlas.background();
    let mask: Vec<usize> = if bg.iter().any(|&b| b) {
        initial
            .chunks(c)
            .enumerate()
            .filter(|(_, row)| {
                let mut fg: Vec<f64> = row.iter().zip(bg).filter(|(_, &b)| !b).map(|(p, _)| *p).collect();
                sum_unordered(&mut fg) > MASK_EPS
            })
            .map(|(i, _)| i)
            .collect()
    } else {
        (0..grid.num_voxels()).collect()
    };
    if mask.is_empty() {
        return Err(Error::Data("the atlas assigns no foreground mass to the working grid".into()));
    }
    let mut prior: Vec<f64> = mask.iter().flat_map(|&i| initial[i * c..(i + 1) * c].to_vec()).collect();
    drop(initial);
    let warp = AtlasWarp::new(grid, mask.clone(), inp.affine, inp.atlas.grid());
    let obs = Observations::gather(inp.structural, inp.diffusion, &mask)?;
    let data_var = obs.intensity_variance();

    let gauss_groups = inp.sharing.gaussian_groups();
    let beta_groups = inp.sharing.beta_groups();
    let dsw_groups = inp.sharing.dsw_groups();

    let mut resp = Responsibilities::new_unchecked(c, prior.clone());
    let mut params: Option<ClassParams> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let cur = params.as_ref();
        let gaussian = m_step_gaussian(
            &resp,
            &obs,
            inp.hyper,
            &gauss_groups,
            cur.map(|p| &p.gaussian[..]),
            &data_var,
            mode,
        )?;
        let beta = m_step_beta(&resp, &obs, &beta_groups, cur.map(|p| &p.beta[..]), mode)?;
        let axes0: Vec<Vector3<f64>> = match cur {
            Some(p) => p.dsw.iter().map(|d| d.axis).collect(),
            None => vec![Vector3::z(); c],
        };
        let axes = m_step_psi(&resp, &obs, &dsw_groups, &axes0, mode);
        let kappa0: Vec<f64> = match cur {
            Some(p) => p.dsw.iter().map(|d| d.kappa).collect(),
            None => vec![opts.init_kappa; c],
        };
        let kappa = m_step_kappa(&resp, &obs, &dsw_groups, &axes, &kappa0, mode)?;
        let dsw = axes
            .iter()
            .zip(&kappa)
            .map(|(&a, &k)| DswParams::new(a, k))
            .collect::<Result<Vec<_>>>()?;
        let p = ClassParams::new(gaussian, beta, dsw)?;

        let deform_now = opts.deform && it % opts.deform_every == 0;
        if deform_now {
            let w = resp.data();
            let mut trial = field.clone();
            let entropy = AtlasWarp::entropy_term(w, c);
            let objective = |x: &[f64], g: &mut [f64]| {
                trial.set_params(x);
                let (v, gr) = warp.kl_with_entropy(inp.atlas, &trial, w, entropy, mode);
                g.copy_from_slice(&gr);
                v
            };
            let cg = CgOptions::default().with_max_iter(opts.deform_iters);
            let res = minimize_cg(objective, &field.params(), None, &cg)?;
            field.set_params(&res.x);
            prior = warp.priors(inp.atlas, &field);
        }

        let reg = if opts.deform { field.stiffness() * bending_energy(&field).0 } else { 0.0 };
        let (new_resp, bound) = e_step(&p, inp.hyper, &obs, &prior, reg, mode)?;
        resp = new_resp;
        params = Some(p);
        log::debug!("iteration {it}: bound {bound}");
        let prev = trace.last().copied();
        trace.push(bound);
        if let Some(prev) = prev {
            let check = !opts.deform || deform_now;
            if check && (bound - prev).abs() <= opts.tol * bound.abs() {
                converged = true;
                break;
            }
        }
    }
    let params = params.ok_or_else(|| Error::Config("max_iter must be at least 1".into()))?;

    let labels_in = hard_segmentation(&resp);
    let mut labels = Volume::zeros(grid.clone(), 1);
    let mut posteriors = Volume::zeros(grid.clone(), c);
    for (k, &i) in mask.iter().enumerate() {
        labels.data_mut()[i] = labels_in[k] as f64;
        posteriors.voxel_mut(i).copy_from_slice(resp.row(k));
    }
    let expected = expected_volumes(&resp, grid.voxel_volume());
    Ok(GemResult {
        params,
        responsibilities: resp,
        mask,
        labels,
        posteriors,
        expected_volumes: expected,
        bound_trace: trace,
        iterations,
        converged,
        deformation: field,
    })
}
