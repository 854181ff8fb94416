use nalgebra::Vector3;
use rayon::prelude::*;

use super::{ClassParams, Hyperparams, Observations, Responsibilities};
use crate::distributions::{log_partition, GaussianEval};
use crate::error::{Error, Result};
use crate::atlas::MAX_CLASSES;
use crate::par::{reduce, sum_unordered, Reduction};
use crate::special::log_beta_fn;

/// Per-class quantities needed to evaluate the likelihood of one voxel.
#[derive(Debug, Clone)]
pub struct ClassTerms {
    gauss: Vec<GaussianEval>,
    alpha_m1: Vec<f64>,
    beta_m1: Vec<f64>,
    log_b: Vec<f64>,
    axis: Vec<Vector3<f64>>,
    kappa: Vec<f64>,
    niw_log_prior: f64,
}

impl ClassTerms {
    pub fn new(params: &ClassParams, hyper: &Hyperparams) -> Result<Self> {
        let c = params.num_classes();
        if hyper.num_classes() != c {
            return Err(Error::Config(format!(
                "{} hyperparameter entries for {c} classes",
                hyper.num_classes()
            )));
        }
        let gauss = params
            .gaussian
            .iter()
            .map(|g| g.evaluator())
            .collect::<Result<Vec<_>>>()?;
        let mut lp: Vec<f64> = gauss.iter().zip(&hyper.niw).map(|(e, h)| h.log_prior(e)).collect();
        let niw_log_prior = sum_unordered(&mut lp);
        Ok(Self {
            alpha_m1: params.beta.iter().map(|b| b.alpha - 1.0).collect(),
            beta_m1: params.beta.iter().map(|b| b.beta - 1.0).collect(),
            log_b: params
                .beta
                .iter()
                .map(|b| log_beta_fn(b.alpha, b.beta))
                .collect::<Result<Vec<_>>>()?,
            axis: params.dsw.iter().map(|d| d.axis).collect(),
            kappa: params.dsw.iter().map(|d| d.kappa).collect(),
            gauss,
            niw_log_prior,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.gauss.len()
    }

    /// `Σ_c log p(μ_c, Σ_c | M_c, n_c)`.
    pub fn niw_log_prior(&self) -> f64 {
        self.niw_log_prior
    }

    /// Log-likelihood of voxel `v` under class `c`, excluding the atlas prior.
    #[inline]
    pub fn log_likelihood(&self, obs: &Observations, v: usize, c: usize) -> f64 {
        let mut l = self.gauss[c].logpdf(obs.intensity(v));
        l += self.alpha_m1[c] * obs.ln_f[v] + self.beta_m1[c] * obs.ln_1mf[v] - self.log_b[c];
        if obs.has_direction(v) {
            let k = obs.fa(v) * self.kappa[c];
            let t = self.axis[c].dot(obs.dir(v));
            l += k * t * t - log_partition(k).0;
        }
        l
    }
}

/// Responsibilities at the current parameters and the lower bound they
/// attain, which equals the objective there.
///
/// `prior` is the deformed atlas (row-major `V x C`); `regularizer` is the
/// deformation penalty `λR(θ)` subtracted from the bound.
pub fn e_step(
    params: &ClassParams,
    hyper: &Hyperparams,
    obs: &Observations,
    prior: &[f64],
    regularizer: f64,
    mode: Reduction,
) -> Result<(Responsibilities, f64)> {
    let terms = ClassTerms::new(params, hyper)?;
    let c = terms.num_classes();
    let n = obs.len();
    if prior.len() != n * c {
        return Err(Error::Config("prior does not match voxels and classes".into()));
    }
    let mut w = vec![0.0; n * c];
    let mut lse = vec![0.0; n];
    w.par_chunks_mut(c).zip(lse.par_iter_mut()).enumerate().for_each(|(v, (row, out))| {
        let mut max = f64::NEG_INFINITY;
        for k in 0..c {
            let l = terms.log_likelihood(obs, v, k) + prior[v * c + k].ln();
            row[k] = l;
            max = max.max(l);
        }
        for x in row.iter_mut() {
            *x = (*x - max).exp();
        }
        let mut tmp = [0.0; MAX_CLASSES];
        tmp[..c].copy_from_slice(row);
        let s = sum_unordered(&mut tmp[..c]);
        for x in row.iter_mut() {
            *x /= s;
        }
        *out = max + s.ln();
    });
    if let Some(v) = lse.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("posterior vanishes or is undefined at sample {v}")));
    }
    let total = reduce(n, mode, || 0.0, |acc, v| *acc += lse[v], |a, b| *a += b);
    let bound = total + terms.niw_log_prior() - regularizer;
    Ok((Responsibilities::new_unchecked(c, w), bound))
}
