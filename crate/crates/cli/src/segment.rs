use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use jointseg::affine::{register_affine_mi, RegistrationOptions};
use jointseg::atlas::ProbAtlas;
use jointseg::distributions::NiwHyper;
use jointseg::dti::tensor_features;
use jointseg::gem::{run_gem, DiffusionFeatures, GemInputs, Hyperparams, SharingGroups};
use jointseg::io::{read_affine, read_atlas, read_nifti, write_affine, write_json, write_nifti, NiftiDatatype, RunConfig, RunReport};
use jointseg::par::Reduction;
use jointseg::volume::{logeuclidean_resample, regrid, resample, Boundary, GridSpec, Interpolation, Volume};
use jointseg::{Error, Result};
use nalgebra::{DVector, Matrix4};

use crate::tensor::tensors_from_dwi;
use crate::{io_error, qc, CommonArgs};

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Structural image.
    #[arg(long)]
    pub t1: PathBuf,
    /// FA map (with --dirs).
    #[arg(long, requires = "dirs", conflicts_with = "dwi", required_unless_present = "dwi")]
    pub fa: Option<PathBuf>,
    /// Principal directions, three channels.
    #[arg(long, requires = "fa")]
    pub dirs: Option<PathBuf>,
    /// Diffusion-weighted series (with --bval and --bvec) instead of --fa/--dirs.
    #[arg(long, requires_all = ["bval", "bvec"])]
    pub dwi: Option<PathBuf>,
    #[arg(long)]
    pub bval: Option<PathBuf>,
    #[arg(long)]
    pub bvec: Option<PathBuf>,
    /// Atlas volume; overrides the configured path.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    /// Subject-to-atlas affine (4 rows of 4 numbers); skips registration.
    #[arg(long)]
    pub affine: Option<PathBuf>,
    /// Write PNG overlays of the labels on axial slices.
    #[arg(long)]
    pub qc: bool,
}

fn same_grid(a: &GridSpec, b: &GridSpec) -> bool {
    a.same_geometry(b, 1e-9)
}

fn onto(vol: Volume, grid: &GridSpec, mode: Interpolation) -> Result<Volume> {
    if same_grid(vol.grid(), grid) {
        return vol.with_grid(grid.clone());
    }
    resample(&vol, grid, mode, Boundary::Clamp)
}

fn diffusion(args: &SegmentArgs, cfg: &RunConfig, grid: &GridSpec) -> Result<DiffusionFeatures> {
    if let (Some(fa), Some(dirs)) = (&args.fa, &args.dirs) {
        let fa = onto(read_nifti(fa)?, grid, Interpolation::Trilinear)?;
        // directions are axial, so they are not averaged
        let dirs = onto(read_nifti(dirs)?, grid, Interpolation::Nearest)?;
        return DiffusionFeatures::new(fa, dirs);
    }
    match (&args.dwi, &args.bval, &args.bvec) {
        (Some(d), Some(b), Some(g)) => {
            let t = tensors_from_dwi(d, b, g, cfg.dti.bval, cfg.dti.shell_tol)?;
            let t = if same_grid(t.grid(), grid) {
                t
            } else {
                logeuclidean_resample(&t, grid, Boundary::Clamp)?
            };
            tensor_features(&t)
        }
        _ => Err(Error::Config("give --fa and --dirs, or --dwi with --bval and --bvec".into())),
    }
}

/// NIW hyperparameters from the class table: a hypermean with its count,
/// the count defaulting to the class prior volume in mm³. Classes without a
/// hypermean are left uninformative.
fn hyperparams(cfg: &RunConfig, atlas: &ProbAtlas, dim: usize) -> Result<Hyperparams> {
    let c = atlas.num_classes();
    let voxel = atlas.grid().voxel_volume();
    let mut niw = Vec::with_capacity(c);
    for (k, name) in atlas.names().iter().enumerate() {
        let entry = cfg.class(name).and_then(|e| e.hypermean.as_ref().map(|m| (m, e.count)));
        niw.push(match entry {
            None => NiwHyper::flat(dim),
            Some((m, count)) => {
                if m.len() != dim {
                    return Err(Error::Config(format!("class {name}: hypermean needs {dim} components")));
                }
                let n = count.unwrap_or_else(|| {
                    atlas.probs().data().chunks(c).map(|p| p[k]).sum::<f64>() * voxel
                });
                NiwHyper::new(DVector::from_column_slice(m), n)?
            }
        });
    }
    Hyperparams::new(niw)
}

fn check_names(cfg: &RunConfig, atlas: &ProbAtlas) -> Result<()> {
    for e in &cfg.classes {
        if !atlas.names().contains(&e.name) {
            return Err(Error::Config(format!(
                "class {} is not in the atlas (classes: {})",
                e.name,
                atlas.names().join(", ")
            )));
        }
    }
    Ok(())
}

fn sharing(cfg: &RunConfig, from_manifest: SharingGroups) -> Result<SharingGroups> {
    let Some(s) = &cfg.sharing else {
        return Ok(from_manifest);
    };
    let pick = |o: &Option<Vec<usize>>, d: &[usize]| o.clone().unwrap_or_else(|| d.to_vec());
    SharingGroups::new(
        pick(&s.gaussian, from_manifest.gaussian_map()),
        pick(&s.beta, from_manifest.beta_map()),
        pick(&s.dsw, from_manifest.dsw_map()),
    )
    .map_err(|e| Error::Config(format!("sharing: {e}")))
}

/// Template intensity per class: configured, else the first hypermean
/// component, else evenly spaced in class order with background at zero.
fn template_intensities(cfg: &RunConfig, atlas: &ProbAtlas) -> Vec<f64> {
    let c = atlas.num_classes();
    atlas
        .names()
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let e = cfg.class(name);
            e.and_then(|e| e.template)
                .or_else(|| e.and_then(|e| e.hypermean.as_ref().map(|m| m[0])))
                .unwrap_or(if atlas.background()[k] {
                    0.0
                } else {
                    (k + 1) as f64 / c as f64
                })
        })
        .collect()
}

pub fn run(args: &SegmentArgs) -> Result<()> {
    let start = Instant::now();
    let common = &args.common;
    let mut cfg = common.load_config()?;
    if let Some(a) = &args.atlas {
        cfg.atlas = Some(a.clone());
    }
    let (atlas, manifest_sharing) = read_atlas(cfg.require_atlas()?)?;
    check_names(&cfg, &atlas)?;
    let sharing = sharing(&cfg, manifest_sharing)?;

    let t1 = read_nifti(&args.t1)?;
    let grid = regrid(t1.grid(), cfg.grid.resolution)?;
    log::info!("working grid {:?} at {} mm", grid.dims(), cfg.grid.resolution);
    let structural = onto(t1, &grid, Interpolation::Trilinear)?;
    let diffusion = diffusion(args, &cfg, &grid)?;
    let hyper = hyperparams(&cfg, &atlas, structural.channels())?;

    let affine: Matrix4<f64> = match &args.affine {
        Some(p) => read_affine(p)?,
        None => {
            let template = atlas.soft_template(&template_intensities(&cfg, &atlas))?;
            let opts = RegistrationOptions {
                bins: cfg.registration.bins,
                levels: cfg.registration.levels,
                seed: cfg.seed,
                ..RegistrationOptions::default()
            };
            log::info!("registering to the atlas");
            register_affine_mi(&structural.channel(0)?, &template, &opts)?
        }
    };

    let mut opts = cfg.gem_options();
    opts.reduction = if common.deterministic {
        Reduction::Deterministic
    } else {
        Reduction::Fast
    };
    let inputs = GemInputs {
        structural: &structural,
        diffusion: &diffusion,
        atlas: &atlas,
        affine: &affine,
        hyper: &hyper,
        sharing: &sharing,
    };
    let result = run_gem(&inputs, &opts)?;
    log::info!(
        "{} iterations, converged: {}, bound {:?}",
        result.iterations,
        result.converged,
        result.bound_trace.last()
    );

    common.prepare_out_dir()?;
    write_nifti(&result.labels, &common.out("labels.nii.gz"), NiftiDatatype::Int16)?;
    write_nifti(&result.posteriors, &common.out("posteriors.nii.gz"), NiftiDatatype::Float32)?;
    write_affine(&affine, &common.out("affine.txt"))?;
    let mut tsv = String::from("class\texpected_volume_mm3\n");
    for (name, v) in atlas.names().iter().zip(&result.expected_volumes) {
        writeln!(tsv, "{name}\t{v:?}").unwrap();
    }
    let vpath = common.out("volumes.tsv");
    std::fs::write(&vpath, tsv).map_err(|e| io_error(&vpath, e))?;
    if args.qc {
        qc::write_overlays(&structural, &result.labels, atlas.background(), &common.out("qc"))?;
    }
    let wall = (!common.deterministic).then(|| start.elapsed().as_secs_f64());
    if let Some(w) = wall {
        log::info!("finished in {w:.1} s");
    }
    let report = RunReport::new(&result, atlas.names(), grid.voxel_volume(), &affine, &cfg, wall);
    write_json(&report, &common.out("report.json"))
}
