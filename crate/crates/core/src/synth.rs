//! Synthetic datasets drawn from the generative model, with known ground truth.

use std::f64::consts::PI;

use nalgebra::{DVector, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaDist, Distribution};
use rayon::prelude::*;

use crate::atlas::{AtlasWarp, DeformationField, ProbAtlas};
use crate::distributions::{sample_dsw, sample_gaussian, BetaParams, DswParams, GaussianParams};
use crate::error::{Error, Result};
use crate::gem::{ClassParams, DiffusionFeatures};
use crate::volume::{GridSpec, Volume};

/// Smallest distance of a sampled FA from 0 and 1.
const FA_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Labels `1..=C`.
    pub labels: Volume,
    pub params: ClassParams,
    pub deformation: DeformationField,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub structural: Volume,
    pub diffusion: DiffusionFeatures,
    pub truth: GroundTruth,
}

/// Grid of `n³` one-millimetre voxels centred on the world origin.
pub fn centered_grid(n: usize) -> Result<GridSpec> {
    let o = -(n as f64 - 1.0) / 2.0;
    GridSpec::isotropic([n, n, n], 1.0, [o, o, o])
}

/// Atlas with a background class and `classes - 1` soft spherical blobs
/// arranged on a ring in the `z = 0` plane. With one class the atlas is flat.
pub fn blob_atlas(n: usize, classes: usize) -> Result<ProbAtlas> {
    if classes == 0 || n < 4 {
        return Err(Error::Config("blob atlas needs at least one class and 4 voxels per side".into()));
    }
    let grid = centered_grid(n)?;
    if classes == 1 {
        let probs = Volume::from_fn(grid, 1, |_, out| out[0] = 1.0);
        return ProbAtlas::new(probs, vec!["tissue".into()]);
    }
    let blobs = classes - 1;
    let ring = if blobs == 1 { 0.0 } else { 0.25 * n as f64 };
    let radius = 0.2 * n as f64;
    let centres: Vec<[f64; 3]> = (0..blobs)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / blobs as f64;
            [ring * a.cos(), ring * a.sin(), 0.0]
        })
        .collect();
    let g2 = grid.clone();
    let probs = Volume::from_fn(grid, classes, move |ijk, out| {
        let x = g2.voxel_to_world(ijk.map(|v| v as f64));
        let mut total = 0.0;
        for (k, c) in centres.iter().enumerate() {
            let d = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2)).sqrt();
            let m = 0.98 / (1.0 + (d - radius).exp());
            out[k + 1] = m;
            total += m;
        }
        if total > 0.98 {
            for p in &mut out[1..] {
                *p *= 0.98 / total;
            }
            total = 0.98;
        }
        out[0] = 1.0 - total;
    });
    let mut names = vec!["background".to_string()];
    names.extend((1..classes).map(|k| format!("blob{k}")));
    let mut bg = vec![false; classes];
    bg[0] = true;
    ProbAtlas::new(probs, names)?.with_background(bg)
}

/// The 32³, 4-class atlas used by the tests and the `simulate` command.
pub fn default_atlas() -> ProbAtlas {
    blob_atlas(32, 4).expect("valid default atlas")
}

/// Well-separated class parameters for `classes` classes of scalar intensity.
pub fn default_truth(classes: usize) -> ClassParams {
    let betas = [(2.0, 8.0), (8.0, 4.0), (5.0, 5.0), (6.0, 3.0)];
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let axes = [Vector3::z(), Vector3::x(), Vector3::y(), Vector3::new(s, s, 0.0)];
    let kappas = [8.0, 20.0, 15.0, 25.0];
    let gaussian = (0..classes)
        .map(|k| GaussianParams::scalar(40.0 * (k + 1) as f64, 36.0).expect("valid"))
        .collect();
    let beta = (0..classes)
        .map(|k| {
            let (a, b) = betas[k % 4];
            BetaParams::new(a, b).expect("valid")
        })
        .collect();
    let dsw = (0..classes)
        .map(|k| DswParams::new(axes[k % 4], kappas[k % 4]).expect("valid"))
        .collect();
    ClassParams::new(gaussian, beta, dsw).expect("consistent")
}

/// Draws labels, intensities, FA and directions voxel by voxel.
///
/// Every voxel has its own random stream derived from `seed` and its index,
/// so the output does not depend on scheduling. `affine` maps grid world
/// coordinates to atlas world coordinates before the deformation.
pub fn sample_dataset(
    atlas: &ProbAtlas,
    truth: &ClassParams,
    field: &DeformationField,
    grid: &GridSpec,
    affine: &Matrix4<f64>,
    seed: u64,
) -> Result<SyntheticDataset> {
    let c = atlas.num_classes();
    if truth.num_classes() != c {
        return Err(Error::Config(format!(
            "truth has {} classes, atlas has {c}",
            truth.num_classes()
        )));
    }
    let dim = truth.gaussian[0].dim();
    let betas = truth
        .beta
        .iter()
        .map(|b| BetaDist::new(b.alpha, b.beta).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    // validate covariances once
    for g in &truth.gaussian {
        g.evaluator()?;
    }
    let n = grid.num_voxels();
    let warp = AtlasWarp::new(grid, (0..n).collect(), affine, atlas.grid());
    let prior = warp.priors(atlas, field);

    struct Draw {
        label: usize,
        s: DVector<f64>,
        f: f64,
        phi: Vector3<f64>,
    }
    let draws: Vec<Draw> = (0..n)
        .into_par_iter()
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(v as u64);
            let u: f64 = rng.random();
            let row = &prior[v * c..(v + 1) * c];
            let mut acc = 0.0;
            let mut label = c - 1;
            for (k, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    label = k;
                    break;
                }
            }
            let s = sample_gaussian(&truth.gaussian[label], &mut rng).expect("validated covariance");
            let f = betas[label].sample(&mut rng).clamp(FA_MARGIN, 1.0 - FA_MARGIN);
            let d = truth.dsw[label];
            let phi = sample_dsw(&DswParams { axis: d.axis, kappa: f * d.kappa }, &mut rng);
            Draw { label, s, f, phi }
        })
        .collect();

    let mut s = Vec::with_capacity(n * dim);
    let mut fa = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    for d in draws {
        s.extend(d.s.iter());
        fa.push(d.f);
        dirs.extend([d.phi.x, d.phi.y, d.phi.z]);
        labels.push((d.label + 1) as f64);
    }
    Ok(SyntheticDataset {
        structural: Volume::new(grid.clone(), dim, s)?,
        diffusion: DiffusionFeatures::new(Volume::new(grid.clone(), 1, fa)?, Volume::new(grid.clone(), 3, dirs)?)?,
        truth: GroundTruth {
            labels: Volume::new(grid.clone(), 1, labels)?,
            params: truth.clone(),
            deformation: field.clone(),
            seed,
        },
    })
}

/// The default 32³, 4-class dataset with an undeformed atlas.
pub fn default_dataset(seed: u64) -> Result<SyntheticDataset> {
    let atlas = default_atlas();
    let field = DeformationField::over_grid(atlas.grid(), 10, 0.05)?;
    sample_dataset(
        &atlas,
        &default_truth(4),
        &field,
        &atlas.grid().clone(),
        &Matrix4::identity(),
        seed,
    )
}
