use std::path::{Path, PathBuf};

use clap::Args;
use jointseg::dti::{fit_dti_wls, select_shell, tensor_features, DwiProtocol};
use jointseg::gem::DiffusionFeatures;
use jointseg::io::{read_nifti, write_nifti, NiftiDatatype};
use jointseg::volume::{logeuclidean_resample, regrid, Boundary, TensorVolume};
use jointseg::{Error, Result};

use crate::CommonArgs;

#[derive(Args, Debug)]
pub struct TensorArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Diffusion-weighted volume, one channel per gradient.
    #[arg(long, requires_all = ["bval", "bvec"], conflicts_with = "tensor", required_unless_present = "tensor")]
    pub dwi: Option<PathBuf>,
    #[arg(long)]
    pub bval: Option<PathBuf>,
    #[arg(long)]
    pub bvec: Option<PathBuf>,
    /// Six-channel tensor volume (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz) instead of a DWI.
    #[arg(long)]
    pub tensor: Option<PathBuf>,
    /// Also write tensors resampled log-Euclidean to this resolution (mm).
    #[arg(long)]
    pub resample: Option<f64>,
}

/// Fits tensors on the configured shell of a DWI series.
pub fn tensors_from_dwi(dwi: &Path, bval: &Path, bvec: &Path, shell: f64, tol: f64) -> Result<TensorVolume> {
    let proto = DwiProtocol::read(bval, bvec)?;
    let vol = read_nifti(dwi)?;
    let (sub, sub_proto) = select_shell(&vol, &proto, shell, tol)?;
    log::info!("fitting tensors to {} of {} channels", sub_proto.len(), proto.len());
    fit_dti_wls(&sub, &sub_proto)
}

fn write_features(f: &DiffusionFeatures, t: &TensorVolume, common: &CommonArgs, suffix: &str) -> Result<()> {
    write_nifti(f.fa(), &common.out(&format!("fa{suffix}.nii.gz")), NiftiDatatype::Float32)?;
    write_nifti(f.dirs(), &common.out(&format!("dirs{suffix}.nii.gz")), NiftiDatatype::Float32)?;
    write_nifti(&t.to_volume(), &common.out(&format!("tensor{suffix}.nii.gz")), NiftiDatatype::Float32)
}

pub fn run(args: &TensorArgs) -> Result<()> {
    let common = &args.common;
    let cfg = common.load_config()?;
    let tensors = match (&args.dwi, &args.bval, &args.bvec, &args.tensor) {
        (Some(d), Some(b), Some(g), None) => tensors_from_dwi(d, b, g, cfg.dti.bval, cfg.dti.shell_tol)?,
        (None, _, _, Some(t)) => TensorVolume::from_volume(&read_nifti(t)?)?,
        _ => return Err(Error::Config("give --dwi with --bval and --bvec, or --tensor".into())),
    };
    let feats = tensor_features(&tensors)?;
    common.prepare_out_dir()?;
    write_features(&feats, &tensors, common, "")?;
    if let Some(r) = args.resample.or(cfg.dti.resample) {
        let target = regrid(tensors.grid(), r)?;
        let res = logeuclidean_resample(&tensors, &target, Boundary::Clamp)?;
        write_features(&tensor_features(&res)?, &res, common, "_resampled")?;
    }
    Ok(())
}
