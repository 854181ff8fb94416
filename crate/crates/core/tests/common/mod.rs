#![allow(dead_code)]

use jointseg::atlas::{atlas_prior, bending_energy, DeformationField, ProbAtlas};
use jointseg::distributions::{beta_logpdf, dsw_logpdf, gaussian_logpdf, FA_CLAMP};
use jointseg::gem::{ClassParams, DiffusionFeatures, Hyperparams};
use jointseg::volume::Volume;
use nalgebra::{DMatrix, DVector, Matrix4, Vector3};

/// Five-point central-difference gradient.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut y = x.to_vec();
    for i in 0..x.len() {
        let hi = h * x[i].abs().max(1.0);
        let mut at = |t: f64| {
            y[i] = x[i] + t;
            let v = f(&y);
            y[i] = x[i];
            v
        };
        g[i] = (-at(2.0 * hi) + 8.0 * at(hi) - 8.0 * at(-hi) + at(-2.0 * hi)) / (12.0 * hi);
    }
    g
}

/// Maximizes `f` by Newton steps on finite-difference derivatives with
/// step halving. Returns the argmax.
pub fn newton_maximize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64]) -> Vec<f64> {
    let n = x0.len();
    let mut x = x0.to_vec();
    for _ in 0..200 {
        let g = fd_gradient(&f, &x, 1e-3);
        let mut h = DMatrix::zeros(n, n);
        for j in 0..n {
            let hj = 1e-4 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            xp[j] += hj;
            let gp = fd_gradient(&f, &xp, 1e-3);
            xp[j] = x[j] - hj;
            let gm = fd_gradient(&f, &xp, 1e-3);
            for i in 0..n {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * hj);
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        // ascent direction from the negated Hessian, shifted until positive definite
        let mut shift = 0.0;
        let step = loop {
            let m = -&h + DMatrix::identity(n, n) * shift;
            if let Some(ch) = m.cholesky() {
                break ch.solve(&DVector::from_column_slice(&g));
            }
            shift = if shift == 0.0 { 1e-8 } else { shift * 10.0 };
        };
        let f0 = f(&x);
        let mut t = 1.0;
        let mut next = x.clone();
        for _ in 0..60 {
            next = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if f(&next) >= f0 - 1e-15 * f0.abs() {
                break;
            }
            t *= 0.5;
        }
        let moved = x.iter().zip(&next).map(|(a, b)| (a - b).abs() / a.abs().max(1.0)).fold(0.0, f64::max);
        x = next;
        if moved < 1e-14 {
            break;
        }
    }
    x
}

/// Log of the joint density marginalized over labels, summed over `voxels`,
/// plus the NIW log priors and minus the deformation penalty. Computed from
/// the public densities one voxel at a time.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_objective(
    params: &ClassParams,
    hyper: &Hyperparams,
    atlas: &ProbAtlas,
    field: &DeformationField,
    affine: &Matrix4<f64>,
    structural: &Volume,
    diffusion: &DiffusionFeatures,
    voxels: &[usize],
    deform: bool,
) -> f64 {
    let grid = structural.grid();
    let c = params.num_classes();
    let mut total = 0.0;
    for &v in voxels {
        let prior = atlas_prior(field, atlas, grid, grid.coords(v), affine);
        let s = structural.voxel(v);
        let f = diffusion.fa().data()[v];
        let d = diffusion.dirs().voxel(v);
        let phi = Vector3::new(d[0], d[1], d[2]);
        let mut p = 0.0;
        for k in 0..c {
            let mut l = gaussian_logpdf(s, &params.gaussian[k]).unwrap();
            l += beta_logpdf(f, &params.beta[k]).unwrap();
            if f >= FA_CLAMP {
                l += dsw_logpdf(&phi, &params.dsw[k].axis, f * params.dsw[k].kappa).unwrap();
            }
            p += prior[k] * l.exp();
        }
        total += p.ln();
    }
    for (g, h) in params.gaussian.iter().zip(&hyper.niw) {
        let ch = g.cov.clone().cholesky().unwrap();
        let log_det = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let e = &g.mean - &h.mean;
        total += -0.5 * log_det - 0.5 * h.scale * (e.transpose() * ch.inverse() * &e)[(0, 0)];
    }
    if deform {
        total -= field.stiffness() * bending_energy(field).0;
    }
    total
}

/// Smooth asymmetric phantom: soft ellipsoids of different intensities on a
/// weak gradient, evaluated at world point `p` (mm, centred near the origin).
pub fn phantom(p: [f64; 3]) -> f64 {
    let blobs: [([f64; 3], [f64; 3], f64); 4] = [
        ([0.0, 0.0, 0.0], [13.0, 10.0, 8.0], 40.0),
        ([-5.0, 3.0, 1.0], [4.0, 6.0, 3.0], 60.0),
        ([6.0, -4.0, -2.0], [3.0, 3.0, 5.0], -25.0),
        ([2.0, 6.0, 3.0], [2.5, 2.0, 2.0], 35.0),
    ];
    let mut v = 10.0 + 0.3 * p[0] - 0.2 * p[1] + 0.1 * p[2];
    for (c, r, a) in blobs {
        let d = ((p[0] - c[0]) / r[0]).powi(2) + ((p[1] - c[1]) / r[1]).powi(2) + ((p[2] - c[2]) / r[2]).powi(2);
        v += a / (1.0 + ((d.sqrt() - 1.0) * 6.0).exp());
    }
    let head = ((p[0] / 16.0).powi(2) + (p[1] / 14.0).powi(2) + (p[2] / 12.0).powi(2)).sqrt();
    v / (1.0 + ((head - 1.0) * 12.0).exp())
}

/// Phantom image on an `n³` 1 mm grid centred at the origin, seen through
/// `t`: the returned image at `y` equals `phantom(t⁻¹ y)`.
pub fn phantom_image(n: usize, t: &Matrix4<f64>) -> Volume {
    let grid = jointseg::synth::centered_grid(n).unwrap();
    let inv = t.try_inverse().unwrap();
    let g = grid.clone();
    Volume::from_fn(grid, 1, move |ijk, out| {
        let w = g.voxel_to_world(ijk.map(|x| x as f64));
        out[0] = phantom(jointseg::volume::apply_affine(&inv, w));
    })
}
