use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{Hyperparams, Observations, Responsibilities};
use crate::distributions::{beta_mom, log_partition, BetaParams, GaussianParams};
use crate::error::{Error, Result};
use crate::optim::{minimize_cg, Bounds, CgOptions};
use crate::atlas::MAX_CLASSES;
use crate::par::{add_into, reduce, sum_unordered, Reduction};
use crate::special::{digamma, log_beta_fn, KAPPA_MAX};
use crate::volume::{canonical_sign, sorted_eigen};

/// Covariance eigenvalues are kept above this fraction of the data variance.
pub const COV_FLOOR: f64 = 1e-6;
/// Groups with less responsibility mass than this keep their parameters.
const MIN_MASS: f64 = 1e-8;
const BETA_MIN: f64 = 1e-3;

/// Summed responsibility of each group at voxel `v`.
#[inline]
fn group_weight(resp: &Responsibilities, v: usize, members: &[usize]) -> f64 {
    let row = resp.row(v);
    match members {
        [a] => row[*a],
        [a, b] => row[*a] + row[*b],
        _ => {
            let mut tmp = [0.0; MAX_CLASSES];
            for (t, &c) in tmp.iter_mut().zip(members) {
                *t = row[c];
            }
            sum_unordered(&mut tmp[..members.len()])
        }
    }
}

/// Weighted statistics of one Gaussian sharing group.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub weight: f64,
    /// Weighted mean of the intensities (zero when `weight` is zero).
    pub mean: DVector<f64>,
    /// `Σ_v w_v (s_v - mean)(s_v - mean)ᵀ`.
    pub scatter: DMatrix<f64>,
    /// `(n_c, M_c)` for every member class.
    pub hyper: Vec<(f64, DVector<f64>)>,
}

impl GaussianStats {
    pub fn collect(
        resp: &Responsibilities,
        obs: &Observations,
        hyper: &Hyperparams,
        members: &[usize],
        mode: Reduction,
    ) -> Self {
        let d = obs.dim();
        let n = obs.len();
        let first = reduce(
            n,
            mode,
            || vec![0.0; d + 1],
            |acc, v| {
                let w = group_weight(resp, v, members);
                acc[0] += w;
                for (a, s) in acc[1..].iter_mut().zip(obs.intensity(v)) {
                    *a += w * s;
                }
            },
            |a, b| add_into(a, &b),
        );
        let weight = first[0];
        let mean = if weight > 0.0 {
            DVector::from_iterator(d, first[1..].iter().map(|s| s / weight))
        } else {
            DVector::zeros(d)
        };
        let scat = reduce(
            n,
            mode,
            || vec![0.0; d * d],
            |acc, v| {
                let w = group_weight(resp, v, members);
                let s = obs.intensity(v);
                for i in 0..d {
                    let di = s[i] - mean[i];
                    for j in 0..=i {
                        acc[i * d + j] += w * di * (s[j] - mean[j]);
                    }
                }
            },
            |a, b| add_into(a, &b),
        );
        let scatter = DMatrix::from_fn(d, d, |i, j| if j <= i { scat[i * d + j] } else { scat[j * d + i] });
        let mut hyper: Vec<(f64, DVector<f64>)> = members
            .iter()
            .map(|&c| (hyper.niw[c].scale, hyper.niw[c].mean.clone()))
            .collect();
        // canonical order, independent of class numbering
        hyper.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| a.1.iter().zip(b.1.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
        });
        Self {
            weight,
            mean,
            scatter,
            hyper,
        }
    }

    /// Second-moment matrix of the data and hypermeans about `mu`.
    fn moment_about(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        let dm = &self.mean - mu;
        let mut m = &self.scatter + (&dm * dm.transpose()) * self.weight;
        for (n, hm) in &self.hyper {
            if *n > 0.0 {
                let e = mu - hm;
                m += (&e * e.transpose()) * *n;
            }
        }
        m
    }
}

/// Gaussian part of the bound for one group: data log-likelihood plus the
/// members' NIW log priors.
pub fn gaussian_q(stats: &GaussianStats, p: &GaussianParams) -> Result<f64> {
    let eval = p.evaluator()?;
    let d = p.dim() as f64;
    let m = stats.moment_about(&p.mean);
    let tr = (eval.inverse_cov() * m).trace();
    let log_det = eval.log_det();
    Ok(-0.5 * (stats.weight + stats.hyper.len() as f64) * log_det
        - 0.5 * stats.weight * d * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * tr)
}

/// Raises the eigenvalues of `cov`, measured relative to the data variance,
/// to at least [`COV_FLOOR`]. Leaves well-conditioned matrices untouched.
fn floor_covariance(cov: DMatrix<f64>, data_var: &[f64]) -> DMatrix<f64> {
    let d = cov.nrows();
    let scale: Vec<f64> = data_var.iter().map(|v| v.max(f64::MIN_POSITIVE).sqrt()).collect();
    let rel = DMatrix::from_fn(d, d, |i, j| cov[(i, j)] / (scale[i] * scale[j]));
    let eig = rel.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= COV_FLOOR {
        return cov;
    }
    let clamped = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(COV_FLOOR)));
    let fixed = &eig.eigenvectors * clamped * eig.eigenvectors.transpose();
    DMatrix::from_fn(d, d, |i, j| 0.5 * (fixed[(i, j)] + fixed[(j, i)]) * scale[i] * scale[j])
}

/// Closed-form mean and covariance for one group.
fn gaussian_closed_form(stats: &GaussianStats, data_var: &[f64]) -> Result<GaussianParams> {
    let n_total: f64 = stats.hyper.iter().map(|(n, _)| n).sum();
    let mut num = &stats.mean * stats.weight;
    for (n, m) in &stats.hyper {
        if *n > 0.0 {
            num += m * *n;
        }
    }
    let mu = if n_total > 0.0 { num / (n_total + stats.weight) } else { stats.mean.clone() };
    let cov = stats.moment_about(&mu) / (stats.hyper.len() as f64 + stats.weight);
    GaussianParams::new(mu, floor_covariance(cov, data_var))
}

/// Updates the structural Gaussians. Classes in a group receive identical
/// parameters. With `current` given, a group keeps its old parameters when
/// the update would lower its part of the bound (possible only when the
/// covariance floor is active).
pub fn m_step_gaussian(
    resp: &Responsibilities,
    obs: &Observations,
    hyper: &Hyperparams,
    groups: &[Vec<usize>],
    current: Option<&[GaussianParams]>,
    data_var: &[f64],
    mode: Reduction,
) -> Result<Vec<GaussianParams>> {
    let c = resp.num_classes();
    let mut out: Vec<Option<GaussianParams>> = vec![None; c];
    for members in groups {
        let stats = GaussianStats::collect(resp, obs, hyper, members, mode);
        let old = current.map(|p| p[members[0]].clone());
        let new = if stats.weight < MIN_MASS {
            log::warn!("Gaussian group {members:?} has no responsibility mass; parameters held");
            match old {
                Some(p) => p,
                None => GaussianParams::new(
                    hyper.niw[members[0]].mean.clone(),
                    DMatrix::from_diagonal(&DVector::from_column_slice(data_var)),
                )?,
            }
        } else {
            let cand = gaussian_closed_form(&stats, data_var)?;
            match old {
                Some(p) if gaussian_q(&stats, &cand)? < gaussian_q(&stats, &p)? => p,
                _ => cand,
            }
        };
        for &m in members {
            out[m] = Some(new.clone());
        }
    }
    out.into_iter()
        .map(|p| p.ok_or_else(|| Error::Config("sharing groups do not cover every class".into())))
        .collect()
}

/// Weighted sufficient statistics of FA for one Beta group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaStats {
    pub weight: f64,
    pub sum_ln_f: f64,
    pub sum_ln_1mf: f64,
    pub sum_f: f64,
    pub sum_f2: f64,
}

impl BetaStats {
    pub fn collect(resp: &Responsibilities, obs: &Observations, members: &[usize], mode: Reduction) -> Self {
        let s = reduce(
            obs.len(),
            mode,
            || [0.0; 5],
            |acc, v| {
                let w = group_weight(resp, v, members);
                let f = obs.ln_f[v].exp();
                acc[0] += w;
                acc[1] += w * obs.ln_f[v];
                acc[2] += w * obs.ln_1mf[v];
                acc[3] += w * f;
                acc[4] += w * f * f;
            },
            |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
        );
        Self {
            weight: s[0],
            sum_ln_f: s[1],
            sum_ln_1mf: s[2],
            sum_f: s[3],
            sum_f2: s[4],
        }
    }

    /// Method-of-moments starting point.
    pub fn moments(&self) -> BetaParams {
        let mean = self.sum_f / self.weight;
        let var = (self.sum_f2 / self.weight - mean * mean).max(0.0);
        beta_mom(mean, var)
    }
}

/// `(α-1)Σw log f + (β-1)Σw log(1-f) - W log B(α, β)` and its gradient.
pub fn beta_objective(stats: &BetaStats, alpha: f64, beta: f64) -> Result<(f64, [f64; 2])> {
    let lb = log_beta_fn(alpha, beta)?;
    let v = (alpha - 1.0) * stats.sum_ln_f + (beta - 1.0) * stats.sum_ln_1mf - stats.weight * lb;
    let dab = digamma(alpha + beta);
    Ok((
        v,
        [
            stats.sum_ln_f - stats.weight * (digamma(alpha) - dab),
            stats.sum_ln_1mf - stats.weight * (digamma(beta) - dab),
        ],
    ))
}

fn fit_beta(stats: &BetaStats, start: BetaParams) -> Result<BetaParams> {
    let w = stats.weight;
    let objective = |x: &[f64], g: &mut [f64]| match beta_objective(stats, x[0], x[1]) {
        Ok((v, gr)) => {
            g[0] = -gr[0] / w;
            g[1] = -gr[1] / w;
            -v / w
        }
        Err(_) => f64::NAN,
    };
    let bounds = Bounds::lower(vec![BETA_MIN; 2]);
    let mut opts = CgOptions::default().with_max_iter(200).with_grad_tol(1e-10).with_abs_tol(1e-8);
    opts.max_backtracks = 30;
    let res = minimize_cg(objective, &[start.alpha, start.beta], Some(&bounds), &opts)?;
    BetaParams::new(res.x[0], res.x[1])
}

/// Updates the FA Beta distributions. Without `current` every group starts
/// from its method-of-moments estimate.
pub fn m_step_beta(
    resp: &Responsibilities,
    obs: &Observations,
    groups: &[Vec<usize>],
    current: Option<&[BetaParams]>,
    mode: Reduction,
) -> Result<Vec<BetaParams>> {
    let mut out = vec![None; resp.num_classes()];
    for members in groups {
        let stats = BetaStats::collect(resp, obs, members, mode);
        let new = if stats.weight < MIN_MASS {
            log::warn!("Beta group {members:?} has no responsibility mass; parameters held");
            current.map(|p| p[members[0]]).unwrap_or(BetaParams { alpha: 1.0, beta: 1.0 })
        } else {
            let start = current.map(|p| p[members[0]]).unwrap_or_else(|| stats.moments());
            fit_beta(&stats, start)?
        };
        for &m in members {
            out[m] = Some(new);
        }
    }
    out.into_iter()
        .map(|p| p.ok_or_else(|| Error::Config("sharing groups do not cover every class".into())))
        .collect()
}

/// Updates the Watson mean axes: leading eigenvector of `Σ_v w_v f_v φ_v φ_vᵀ`.
pub fn m_step_psi(
    resp: &Responsibilities,
    obs: &Observations,
    groups: &[Vec<usize>],
    current: &[Vector3<f64>],
    mode: Reduction,
) -> Vec<Vector3<f64>> {
    let mut out = current.to_vec();
    for members in groups {
        let s = reduce(
            obs.len(),
            mode,
            || [0.0; 6],
            |acc, v| {
                if !obs.has_direction(v) {
                    return;
                }
                let w = group_weight(resp, v, members) * obs.fa(v);
                let p = obs.dir(v);
                acc[0] += w * p.x * p.x;
                acc[1] += w * p.y * p.y;
                acc[2] += w * p.z * p.z;
                acc[3] += w * p.x * p.y;
                acc[4] += w * p.x * p.z;
                acc[5] += w * p.y * p.z;
            },
            |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
        );
        if s[0] + s[1] + s[2] <= 0.0 {
            log::warn!("direction scatter of group {members:?} is zero; axis held");
            continue;
        }
        let m = Matrix3::new(s[0], s[3], s[4], s[3], s[1], s[5], s[4], s[5], s[2]);
        let (_, vecs) = sorted_eigen(&m);
        let axis = canonical_sign(vecs[0].normalize());
        for &c in members {
            out[c] = axis;
        }
    }
    out
}

/// Voxels with less group weight than this are left out while searching for
/// the concentration; the exact objective decides whether the result is kept.
const KAPPA_PRUNE: f64 = 1e-9;

/// Data for the concentration update of one Watson group.
#[derive(Debug, Clone)]
pub struct KappaStats {
    /// `Σ_v w_v f_v (ψᵀφ_v)²`
    pub alignment: f64,
    /// `(w_v, f_v)` for voxels with a defined direction and nonzero weight.
    pub samples: Vec<(f64, f64)>,
    pub weight: f64,
}

impl KappaStats {
    pub fn collect(
        resp: &Responsibilities,
        obs: &Observations,
        members: &[usize],
        axis: &Vector3<f64>,
        mode: Reduction,
    ) -> Self {
        Self::collect_above(resp, obs, members, axis, 0.0, mode)
    }

    fn collect_above(
        resp: &Responsibilities,
        obs: &Observations,
        members: &[usize],
        axis: &Vector3<f64>,
        min_weight: f64,
        mode: Reduction,
    ) -> Self {
        let mut samples = Vec::new();
        for v in 0..obs.len() {
            let w = group_weight(resp, v, members);
            if w > min_weight && obs.has_direction(v) {
                samples.push((w, obs.fa(v)));
            }
        }
        let alignment = reduce(
            obs.len(),
            mode,
            || 0.0,
            |acc, v| {
                let w = group_weight(resp, v, members);
                if w > min_weight && obs.has_direction(v) {
                    let t = axis.dot(obs.dir(v));
                    *acc += w * obs.fa(v) * t * t;
                }
            },
            |a, b| *a += b,
        );
        let weight = samples.iter().map(|s| s.0).sum();
        Self {
            alignment,
            samples,
            weight,
        }
    }
}

/// `κ Σ w f (ψᵀφ)² - Σ w log Z(f κ)` and its derivative in `κ`.
pub fn kappa_objective(stats: &KappaStats, kappa: f64, mode: Reduction) -> (f64, f64) {
    let (lz, dlz) = reduce(
        stats.samples.len(),
        mode,
        || (0.0, 0.0),
        |acc, i| {
            let (w, f) = stats.samples[i];
            let (l, d) = log_partition(f * kappa);
            acc.0 += w * l;
            acc.1 += w * f * d;
        },
        |a, b| {
            a.0 += b.0;
            a.1 += b.1;
        },
    );
    (kappa * stats.alignment - lz, stats.alignment - dlz)
}

/// Updates the Watson concentrations along the given axes, starting from `current`.
pub fn m_step_kappa(
    resp: &Responsibilities,
    obs: &Observations,
    groups: &[Vec<usize>],
    axes: &[Vector3<f64>],
    current: &[f64],
    mode: Reduction,
) -> Result<Vec<f64>> {
    let mut out = current.to_vec();
    for members in groups {
        let axis = &axes[members[0]];
        let exact = KappaStats::collect(resp, obs, members, axis, mode);
        if exact.weight < MIN_MASS {
            log::warn!("Watson group {members:?} has no directional mass; concentration held");
            continue;
        }
        let pruned = KappaStats::collect_above(resp, obs, members, axis, KAPPA_PRUNE, mode);
        let stats = if pruned.weight >= MIN_MASS { &pruned } else { &exact };
        let w = stats.weight;
        let objective = |x: &[f64], g: &mut [f64]| {
            let (v, d) = kappa_objective(stats, x[0], mode);
            g[0] = -d / w;
            -v / w
        };
        let bounds = Bounds {
            lower: vec![0.0],
            upper: vec![KAPPA_MAX],
        };
        let mut opts = CgOptions::default().with_max_iter(100).with_grad_tol(1e-10).with_abs_tol(1e-7);
        opts.max_backtracks = 30;
        let start = current[members[0]];
        let res = minimize_cg(objective, &[start], Some(&bounds), &opts)?;
        let mut k = res.x[0];
        if k != start && kappa_objective(&exact, k, mode).0 < kappa_objective(&exact, start, mode).0 {
            k = start;
        }
        if k >= KAPPA_MAX && kappa_objective(&exact, k, mode).1 > 0.0 {
            log::warn!("concentration of group {members:?} clamped at {KAPPA_MAX}");
        }
        for &c in members {
            out[c] = k;
        }
    }
    Ok(out)
}
