//! Diffusion tensor fitting and the scalar/directional features used by the
//! segmentation: fractional anisotropy and the principal eigenvector.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gem::DiffusionFeatures;
use crate::volume::{canonical_sign, sorted_eigen, tensor_to_matrix, TensorVolume, Volume};

/// Channels with a b-value at or below this count as unweighted (s/mm²).
pub const B0_THRESHOLD: f64 = 50.0;
/// Gradient directions must have unit norm within this tolerance.
pub const BVEC_TOL: f64 = 1e-3;
/// Signals are clamped at this fraction of the voxel's b=0 mean.
const SIGNAL_FLOOR: f64 = 1e-6;
/// Two directions closer than this (up to sign) are not distinct.
const DISTINCT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DwiProtocol {
    bvals: Vec<f64>,
    bvecs: Vec<Vector3<f64>>,
}

impl DwiProtocol {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<Vector3<f64>>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::Protocol(format!(
                "{} b-values but {} gradient directions",
                bvals.len(),
                bvecs.len()
            )));
        }
        if let Some(b) = bvals.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::Protocol(format!("invalid b-value {b}")));
        }
        if !bvals.iter().any(|&b| b <= B0_THRESHOLD) {
            return Err(Error::Protocol("no b=0 channel".into()));
        }
        let mut distinct: Vec<Vector3<f64>> = Vec::new();
        for (i, (&b, g)) in bvals.iter().zip(&bvecs).enumerate() {
            if b <= B0_THRESHOLD {
                continue;
            }
            if (g.norm() - 1.0).abs() > BVEC_TOL {
                return Err(Error::Protocol(format!(
                    "gradient direction {i} has norm {:.6}, expected 1",
                    g.norm()
                )));
            }
            let g = g.normalize();
            if !distinct.iter().any(|d| 1.0 - d.dot(&g).abs() < DISTINCT_TOL) {
                distinct.push(g);
            }
        }
        if distinct.len() < 6 {
            return Err(Error::Protocol(format!(
                "{} distinct diffusion directions, at least 6 needed",
                distinct.len()
            )));
        }
        Ok(Self { bvals, bvecs })
    }

    /// Parses whitespace-separated b-values and gradient tables. `bvecs`
    /// has three rows (x, y, z) with one column per channel; a table with
    /// one `x y z` row per channel is also accepted.
    pub fn parse(bvals: &str, bvecs: &str) -> Result<Self> {
        let vals = parse_numbers(bvals)?.concat();
        let rows = parse_numbers(bvecs)?;
        let n = vals.len();
        let vecs = if rows.len() == 3 && rows.iter().all(|r| r.len() == n) {
            (0..n).map(|i| Vector3::new(rows[0][i], rows[1][i], rows[2][i])).collect()
        } else if rows.len() == n && rows.iter().all(|r| r.len() == 3) {
            rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect()
        } else {
            return Err(Error::Protocol(format!(
                "gradient table shape does not match {n} b-values"
            )));
        };
        Self::new(vals, vecs)
    }

    /// Reads a protocol from bvals/bvecs text files.
    pub fn read(bvals: &Path, bvecs: &Path) -> Result<Self> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| Error::Protocol(format!("{}: {e}", p.display())))
        };
        Self::parse(&read(bvals)?, &read(bvecs)?)
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[Vector3<f64>] {
        &self.bvecs
    }

    pub fn is_b0(&self, channel: usize) -> bool {
        self.bvals[channel] <= B0_THRESHOLD
    }

    /// Channels of the b=0 images plus the shell within `tol` of `bval`.
    pub fn shell_channels(&self, bval: f64, tol: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.is_b0(i) || (self.bvals[i] - bval).abs() <= tol)
            .collect()
    }

    fn subset(&self, channels: &[usize]) -> Result<Self> {
        Self::new(
            channels.iter().map(|&i| self.bvals[i]).collect(),
            channels.iter().map(|&i| self.bvecs[i]).collect(),
        )
    }
}

fn parse_numbers(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Protocol(format!("line {}: cannot parse {t:?}", n + 1)))
                })
                .collect()
        })
        .collect()
}

/// Keeps the b=0 channels and the shell at `bval` (within `tol`).
pub fn select_shell(dwi: &Volume, proto: &DwiProtocol, bval: f64, tol: f64) -> Result<(Volume, DwiProtocol)> {
    check_channels(dwi, proto)?;
    let keep = proto.shell_channels(bval, tol);
    let sub = proto.subset(&keep)?;
    let c = dwi.channels();
    let data = dwi
        .data()
        .chunks_exact(c)
        .flat_map(|v| keep.iter().map(move |&i| v[i]))
        .collect();
    Ok((Volume::new(dwi.grid().clone(), keep.len(), data)?, sub))
}

fn check_channels(dwi: &Volume, proto: &DwiProtocol) -> Result<()> {
    if dwi.channels() != proto.len() {
        return Err(Error::Protocol(format!(
            "DWI has {} channels but the protocol lists {}",
            dwi.channels(),
            proto.len()
        )));
    }
    Ok(())
}

/// Row of the log-signal design matrix: `-b (gx², gy², gz², 2gxgy, 2gxgz, 2gygz)`.
fn design_row(b: f64, g: &Vector3<f64>) -> [f64; 6] {
    [
        -b * g.x * g.x,
        -b * g.y * g.y,
        -b * g.z * g.z,
        -2.0 * b * g.x * g.y,
        -2.0 * b * g.x * g.z,
        -2.0 * b * g.y * g.z,
    ]
}

/// Solves the weighted problem `min Σ_i w_i² (a_iᵀx - y_i)²` by QR.
fn weighted_solve(a: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Option<DVector<f64>> {
    let mut aw = a.clone();
    let mut yw = y.clone();
    for (i, &wi) in w.iter().enumerate() {
        aw.row_mut(i).scale_mut(wi);
        yw[i] *= wi;
    }
    let qr = aw.qr();
    let qty = qr.q().transpose() * yw;
    qr.r().solve_upper_triangular(&qty)
}

/// Per-voxel weighted least-squares tensor fit of `log(S_i/S0) = -b_i g_iᵀ D g_i`.
///
/// `S0` is the mean of the b=0 channels. An ordinary least-squares fit gives
/// predicted signals whose squares weight a second solve. Voxels with no
/// positive b=0 signal get a zero tensor.
pub fn fit_dti_wls(dwi: &Volume, proto: &DwiProtocol) -> Result<TensorVolume> {
    check_channels(dwi, proto)?;
    let dw: Vec<usize> = (0..proto.len()).filter(|&i| !proto.is_b0(i)).collect();
    let b0: Vec<usize> = (0..proto.len()).filter(|&i| proto.is_b0(i)).collect();
    let a = DMatrix::from_fn(dw.len(), 6, |r, col| design_row(proto.bvals[dw[r]], &proto.bvecs[dw[r]])[col]);
    let sv = a.clone().svd(false, false).singular_values;
    if sv.min() <= 1e-10 * sv.max() {
        return Err(Error::Protocol("gradient directions do not determine a tensor (rank-deficient design)".into()));
    }
    let c = dwi.channels();
    let data = dwi
        .data()
        .par_chunks_exact(c)
        .map(|s| {
            let s0 = b0.iter().map(|&i| s[i]).sum::<f64>() / b0.len() as f64;
            if !(s0 > 0.0 && s0.is_finite()) {
                return [0.0; 6];
            }
            let floor = SIGNAL_FLOOR * s0;
            let y = DVector::from_iterator(dw.len(), dw.iter().map(|&i| (s[i].max(floor) / s0).ln()));
            let ones = vec![1.0; dw.len()];
            let Some(d) = weighted_solve(&a, &y, &ones) else {
                return [0.0; 6];
            };
            let pred = &a * &d;
            let w: Vec<f64> = pred.iter().map(|p| s0 * p.exp()).collect();
            match weighted_solve(&a, &y, &w) {
                Some(d) => [d[0], d[1], d[2], d[3], d[4], d[5]],
                None => [d[0], d[1], d[2], d[3], d[4], d[5]],
            }
        })
        .collect();
    TensorVolume::new(dwi.grid().clone(), data)
}

/// Noiseless signals `S0 exp(-b gᵀ D g)` for every tensor and channel.
pub fn simulate_dwi(tensors: &TensorVolume, s0: f64, proto: &DwiProtocol) -> Result<Volume> {
    let rows: Vec<[f64; 6]> = proto
        .bvals
        .iter()
        .zip(&proto.bvecs)
        .map(|(&b, g)| if b <= B0_THRESHOLD { [0.0; 6] } else { design_row(b, g) })
        .collect();
    let data = tensors
        .tensors()
        .iter()
        .flat_map(|t| {
            rows.iter()
                .map(move |r| s0 * r.iter().zip(t).map(|(a, d)| a * d).sum::<f64>().exp())
        })
        .collect();
    Volume::new(tensors.grid().clone(), proto.len(), data)
}

/// FA and principal direction of one symmetric tensor.
///
/// Eigenvalues are clamped at zero. A zero tensor has FA 0 and direction `e_x`.
pub fn fa_and_direction(t: &[f64; 6]) -> (f64, Vector3<f64>) {
    let (vals, vecs) = sorted_eigen(&tensor_to_matrix(t));
    let l = vals.map(|v| v.max(0.0));
    let norm2 = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if norm2 == 0.0 {
        return (0.0, Vector3::x());
    }
    let spread = (l[0] - l[1]).powi(2) + (l[1] - l[2]).powi(2) + (l[0] - l[2]).powi(2);
    let fa = (0.5 * spread / norm2).sqrt().min(1.0);
    (fa, canonical_sign(vecs[0].normalize()))
}

/// FA and principal-direction volumes from a tensor volume.
pub fn tensor_features(t: &TensorVolume) -> Result<DiffusionFeatures> {
    let feats: Vec<(f64, Vector3<f64>)> = t.tensors().par_iter().map(fa_and_direction).collect();
    let fa = feats.iter().map(|f| f.0).collect();
    let dirs = feats.iter().flat_map(|f| [f.1.x, f.1.y, f.1.z]).collect();
    DiffusionFeatures::new(
        Volume::new(t.grid().clone(), 1, fa)?,
        Volume::new(t.grid().clone(), 3, dirs)?,
    )
}

/// Evenly spread unit directions on a half sphere (golden-angle spiral).
pub fn spiral_directions(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            Vector3::new(r * a.cos(), r * a.sin(), z)
        })
        .collect()
}

/// One b=0 channel followed by `n` directions at `bval`.
pub fn single_shell_protocol(n: usize, bval: f64) -> Result<DwiProtocol> {
    let mut bvals = vec![0.0];
    let mut bvecs = vec![Vector3::zeros()];
    for g in spiral_directions(n) {
        bvals.push(bval);
        bvecs.push(g);
    }
    DwiProtocol::new(bvals, bvecs)
}
