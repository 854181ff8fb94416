use std::fmt::Write as _;

use clap::Args;
use jointseg::atlas::DeformationField;
use jointseg::io::report::class_records;
use jointseg::io::{write_json, write_nifti, AtlasManifest, NiftiDatatype, TruthManifest};
use jointseg::synth::{blob_atlas, default_truth, sample_dataset};
use jointseg::Result;
use nalgebra::Matrix4;

use crate::{io_error, CommonArgs};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Writes `t1`, `fa`, `dirs`, `labels`, the atlas with its manifest, the
/// truth manifest, and a `config.toml` that `segment` can use as is.
pub fn run(args: &SimulateArgs) -> Result<()> {
    let common = &args.common;
    let cfg = common.load_config()?;
    let n = cfg.simulate.grid;
    let c = cfg.simulate.classes;
    let truth = match cfg.truth_params()? {
        Some(t) => t,
        None => default_truth(c),
    };
    let atlas = blob_atlas(n, c)?;
    let field = DeformationField::over_grid(atlas.grid(), cfg.model.control_spacing, cfg.model.lambda)?;
    let grid = atlas.grid().clone();
    log::info!("sampling {n}^3 voxels, {c} classes, seed {}", cfg.seed);
    let d = sample_dataset(&atlas, &truth, &field, &grid, &Matrix4::identity(), cfg.seed)?;
    common.prepare_out_dir()?;
    write_nifti(&d.structural, &common.out("t1.nii.gz"), NiftiDatatype::Float32)?;
    write_nifti(d.diffusion.fa(), &common.out("fa.nii.gz"), NiftiDatatype::Float32)?;
    write_nifti(d.diffusion.dirs(), &common.out("dirs.nii.gz"), NiftiDatatype::Float32)?;
    write_nifti(&d.truth.labels, &common.out("labels.nii.gz"), NiftiDatatype::Int16)?;
    write_nifti(atlas.probs(), &common.out("atlas.nii.gz"), NiftiDatatype::Float32)?;
    let manifest = AtlasManifest::for_atlas(&atlas);
    let mpath = common.out("atlas.txt");
    std::fs::write(&mpath, manifest.to_text()).map_err(|e| io_error(&mpath, e))?;
    write_json(
        &TruthManifest {
            seed: cfg.seed,
            classes: class_records(&truth, atlas.names()),
        },
        &common.out("truth.json"),
    )?;
    let mut seg = String::from("# segment config for this dataset\natlas = \"atlas.nii.gz\"\n\n[grid]\nresolution = 1.0\n");
    for (name, g) in atlas.names().iter().zip(&truth.gaussian) {
        write!(seg, "\n[[classes]]\nname = \"{name}\"\ntemplate = {:?}\n", g.mean[0]).unwrap();
    }
    let cpath = common.out("config.toml");
    std::fs::write(&cpath, seg).map_err(|e| io_error(&cpath, e))?;
    Ok(())
}
