//! Likelihood building blocks: multivariate Gaussian (with its conjugate
//! hyperparameters), Beta on the unit interval for FA, and the axial
//! Dimroth-Scheidegger-Watson density for principal diffusion directions.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::special::{digamma, kummer_fast, kummer_z, log_beta_fn, KAPPA_MAX};

/// FA values are pulled into `[FA_CLAMP, 1 - FA_CLAMP]` before evaluating a Beta density.
pub const FA_CLAMP: f64 = 1e-6;

/// Allowed deviation of a direction from unit length.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Domain(format!(
                "mean of length {d} with covariance {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::Domain("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Pre-factorizes the covariance for repeated density evaluation.
    pub fn evaluator(&self) -> Result<GaussianEval> {
        GaussianEval::new(self)
    }
}

/// Cholesky-factored Gaussian for fast log-density evaluation.
#[derive(Debug, Clone)]
pub struct GaussianEval {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianEval {
    pub fn new(p: &GaussianParams) -> Result<Self> {
        let chol = Cholesky::new(p.cov.clone()).ok_or(Error::NotPositiveDefinite)?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_norm = -0.5 * (p.dim() as f64 * (2.0 * PI).ln() + log_det);
        Ok(Self {
            mean: p.mean.clone(),
            chol,
            log_norm,
        })
    }

    pub fn log_det(&self) -> f64 {
        -2.0 * self.log_norm - self.mean.len() as f64 * (2.0 * PI).ln()
    }

    pub fn mahalanobis_sq(&self, s: &[f64]) -> f64 {
        let diff = DVector::from_iterator(s.len(), s.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let z = self.chol.l_dirty().solve_lower_triangular(&diff).expect("nonsingular factor");
        z.norm_squared()
    }

    #[inline]
    pub fn logpdf(&self, s: &[f64]) -> f64 {
        if s.len() == 1 {
            let l = self.chol.l_dirty()[(0, 0)];
            let z = (s[0] - self.mean[0]) / l;
            return self.log_norm - 0.5 * z * z;
        }
        self.log_norm - 0.5 * self.mahalanobis_sq(s)
    }

    pub fn inverse_cov(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

pub fn gaussian_logpdf(s: &[f64], p: &GaussianParams) -> Result<f64> {
    if s.len() != p.dim() {
        return Err(Error::Domain(format!(
            "sample of length {} for a {}-dimensional Gaussian",
            s.len(),
            p.dim()
        )));
    }
    Ok(p.evaluator()?.logpdf(s))
}

/// Gradient of the Gaussian log-density with respect to the mean, `Σ⁻¹(s - μ)`.
pub fn gaussian_logpdf_grad_mean(s: &[f64], p: &GaussianParams) -> Result<DVector<f64>> {
    let eval = p.evaluator()?;
    let diff = DVector::from_iterator(s.len(), s.iter().zip(p.mean.iter()).map(|(a, b)| a - b));
    Ok(eval.chol.solve(&diff))
}

/// Normal-inverse-Wishart hyperparameters with zero degrees of freedom:
/// only the hypermean `mean` and its pseudo-count `scale` are informative.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwHyper {
    pub mean: DVector<f64>,
    pub scale: f64,
}

impl NiwHyper {
    pub fn new(mean: DVector<f64>, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("invalid NIW hyperparameters (scale {scale})")));
        }
        Ok(Self { mean, scale })
    }

    /// Uninformative hyperparameters (`scale = 0`).
    pub fn flat(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            scale: 0.0,
        }
    }

    /// Log prior density of `(μ, Σ)` up to a constant:
    /// `-½ log|Σ| - (n/2)(μ - M)ᵀ Σ⁻¹ (μ - M)`.
    pub fn log_prior(&self, eval: &GaussianEval) -> f64 {
        let mut lp = -0.5 * eval.log_det();
        if self.scale > 0.0 {
            let m: Vec<f64> = self.mean.iter().copied().collect();
            lp -= 0.5 * self.scale * eval.mahalanobis_sq(&m);
        }
        lp
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Domain(format!("Beta parameters ({alpha}, {beta}) must be positive")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Clamps an FA value into the open unit interval; values outside `[0, 1]` are rejected.
pub fn clamp_fa(f: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Domain(format!("FA value {f} outside [0, 1]")));
    }
    Ok(f.clamp(FA_CLAMP, 1.0 - FA_CLAMP))
}

pub fn beta_logpdf(f: f64, p: &BetaParams) -> Result<f64> {
    let f = clamp_fa(f)?;
    Ok((p.alpha - 1.0) * f.ln() + (p.beta - 1.0) * (1.0 - f).ln() - log_beta_fn(p.alpha, p.beta)?)
}

/// Gradient of [`beta_logpdf`] with respect to `(α, β)`.
pub fn beta_logpdf_grad(f: f64, p: &BetaParams) -> Result<[f64; 2]> {
    let f = clamp_fa(f)?;
    let common = digamma(p.alpha + p.beta);
    Ok([
        f.ln() - digamma(p.alpha) + common,
        (1.0 - f).ln() - digamma(p.beta) + common,
    ])
}

/// Method-of-moments Beta fit from a (weighted) mean and variance. Falls back
/// to the uniform `Beta(1, 1)` when the moments admit no Beta distribution.
pub fn beta_mom(mean: f64, var: f64) -> BetaParams {
    let bound = mean * (1.0 - mean);
    if !(mean > 0.0 && mean < 1.0 && var > 0.0 && var < bound) {
        log::warn!("method of moments undefined for mean {mean}, variance {var}; using Beta(1, 1)");
        return BetaParams {
            alpha: 1.0,
            beta: 1.0,
        };
    }
    let common = bound / var - 1.0;
    BetaParams {
        alpha: mean * common,
        beta: (1.0 - mean) * common,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DswParams {
    pub axis: Vector3<f64>,
    pub kappa: f64,
}

impl DswParams {
    pub fn new(axis: Vector3<f64>, kappa: f64) -> Result<Self> {
        if (axis.norm() - 1.0).abs() > 1e-10 {
            return Err(Error::Domain(format!("mean axis has norm {}", axis.norm())));
        }
        if !(0.0..=KAPPA_MAX).contains(&kappa) {
            return Err(Error::Domain(format!("concentration {kappa} outside [0, {KAPPA_MAX}]")));
        }
        Ok(Self { axis, kappa })
    }
}

/// Watson log-density `κ(ψᵀφ)² - log Z(κ)`, relative to the uniform
/// distribution on the sphere (so it is identically zero at `κ = 0`).
/// Divide `exp` of it by `4π` for a density in solid angle.
pub fn dsw_logpdf(phi: &Vector3<f64>, axis: &Vector3<f64>, kappa: f64) -> Result<f64> {
    if (phi.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::Domain(format!("direction has norm {}", phi.norm())));
    }
    let kz = kummer_z(kappa)?;
    let c = axis.dot(phi);
    Ok(kappa * c * c - kz.log_z)
}

/// `∂/∂κ` of [`dsw_logpdf`].
pub fn dsw_logpdf_dkappa(phi: &Vector3<f64>, axis: &Vector3<f64>, kappa: f64) -> Result<f64> {
    let kz = kummer_z(kappa)?;
    let c = axis.dot(phi);
    Ok(c * c - kz.dlog_z)
}

/// Concentration above which the Watson sampler switches from the uniform
/// envelope to the exponential one.
const SAMPLER_SWITCH: f64 = 50.0;

/// Draws `|t|`, the absolute cosine to the mean axis, with density ∝ exp(κ t²) on [0, 1].
pub fn sample_abs_cosine<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> f64 {
    if kappa <= SAMPLER_SWITCH {
        loop {
            let t: f64 = rng.random();
            let u: f64 = rng.random();
            if u < (kappa * (t * t - 1.0)).exp() {
                return t;
            }
        }
    }
    // With s = 1 - t, κ(1-s)² ≤ κ - κs on [0, 1]: propose s from an exponential
    // of rate κ truncated to [0, 1] and accept with exp(-κ s (1 - s)).
    let tail = (-kappa).exp();
    loop {
        let u: f64 = rng.random();
        let s = -(1.0 - u * (1.0 - tail)).ln() / kappa;
        let a: f64 = rng.random();
        if a < (-kappa * s * (1.0 - s)).exp() {
            return 1.0 - s;
        }
    }
}

/// Orthonormal pair spanning the plane perpendicular to the unit vector `n`.
pub fn orthonormal_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Draws a unit axis from the Watson distribution.
pub fn sample_dsw<R: Rng + ?Sized>(p: &DswParams, rng: &mut R) -> Vector3<f64> {
    let mut t = sample_abs_cosine(p.kappa, rng);
    if rng.random::<bool>() {
        t = -t;
    }
    let az = 2.0 * PI * rng.random::<f64>();
    let r = (1.0 - t * t).max(0.0).sqrt();
    let (e1, e2) = orthonormal_basis(&p.axis);
    (p.axis * t + e1 * (r * az.cos()) + e2 * (r * az.sin())).normalize()
}

/// Draws from a multivariate Gaussian through its Cholesky factor.
pub fn sample_gaussian<R: Rng + ?Sized>(p: &GaussianParams, rng: &mut R) -> Result<DVector<f64>> {
    let chol = Cholesky::new(p.cov.clone()).ok_or(Error::NotPositiveDefinite)?;
    let z = DVector::from_fn(p.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(&p.mean + chol.l() * z)
}

/// `log Z(κ)` for a concentration already known to be in range.
#[inline]
pub(crate) fn log_partition(kappa: f64) -> (f64, f64) {
    let k = kummer_fast(kappa.clamp(0.0, KAPPA_MAX));
    (k.log_z, k.dlog_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_reference_values() {
        let p = GaussianParams::scalar(3.0, 1.0 / (2.0 * PI)).unwrap();
        assert!(gaussian_logpdf(&[3.0], &p).unwrap().abs() < 1e-14);
        let p = GaussianParams::scalar(0.0, 1.0).unwrap();
        assert!((gaussian_logpdf(&[0.0], &p).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
        assert!(gaussian_logpdf(&[0.0, 1.0], &p).is_err());
    }

    #[test]
    fn gaussian_rejects_non_spd() {
        let p = GaussianParams::new(
            DVector::from_vec(vec![0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        )
        .unwrap();
        assert!(matches!(gaussian_logpdf(&[0.0, 0.0], &p), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn gaussian_2d_matches_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a: f64 = rng.random_range(0.5..3.0);
            let c: f64 = rng.random_range(0.5..3.0);
            let b: f64 = rng.random_range(-0.4..0.4) * (a * c).sqrt();
            let mu = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let s = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let p = GaussianParams::new(
                DVector::from_row_slice(&mu),
                DMatrix::from_row_slice(2, 2, &[a, b, b, c]),
            )
            .unwrap();
            // explicit 2x2 inverse and determinant
            let det = a * c - b * b;
            let (dx, dy) = (s[0] - mu[0], s[1] - mu[1]);
            let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
            let naive = -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * q;
            assert!((gaussian_logpdf(&s, &p).unwrap() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_mean_gradient_matches_finite_difference() {
        let p = GaussianParams::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]),
        )
        .unwrap();
        let s = [0.4, -1.1];
        let g = gaussian_logpdf_grad_mean(&s, &p).unwrap();
        for k in 0..2 {
            let h = 1e-5;
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.mean[k] += h;
            pm.mean[k] -= h;
            let fd = (gaussian_logpdf(&s, &pp).unwrap() - gaussian_logpdf(&s, &pm).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1e-3));
        }
    }

    #[test]
    fn beta_reference_values() {
        let u = BetaParams::new(1.0, 1.0).unwrap();
        for f in [0.0, 0.1, 0.5, 0.99, 1.0] {
            assert!(beta_logpdf(f, &u).unwrap().abs() < 1e-15);
        }
        let p = BetaParams::new(2.0, 2.0).unwrap();
        assert!((beta_logpdf(0.5, &p).unwrap() - 1.5f64.ln()).abs() < 1e-14);
        assert!(matches!(beta_logpdf(1.2, &p), Err(Error::Domain(_))));
        assert!(BetaParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn beta_density_integrates_to_one() {
        let p = BetaParams::new(2.5, 4.0).unwrap();
        let n = 100_000;
        let h = 1.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| beta_logpdf((i as f64 + 0.5) * h, &p).unwrap().exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn beta_gradient_matches_finite_difference() {
        // five-point stencil: the digamma terms have large higher derivatives near 0
        let fd5 = |f: &dyn Fn(f64) -> f64, x: f64, h: f64| {
            (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = BetaParams::new(rng.random_range(0.3..8.0), rng.random_range(0.3..8.0)).unwrap();
            let f: f64 = rng.random_range(0.01..0.99);
            let g = beta_logpdf_grad(f, &p).unwrap();
            let h = 1e-3 * p.alpha.min(p.beta);
            let fa = fd5(&|a| beta_logpdf(f, &BetaParams::new(a, p.beta).unwrap()).unwrap(), p.alpha, h);
            let fb = fd5(&|b| beta_logpdf(f, &BetaParams::new(p.alpha, b).unwrap()).unwrap(), p.beta, h);
            assert!((fa - g[0]).abs() <= 1e-6 * g[0].abs().max(1e-3), "{fa} vs {}", g[0]);
            assert!((fb - g[1]).abs() <= 1e-6 * g[1].abs().max(1e-3), "{fb} vs {}", g[1]);
        }
    }

    #[test]
    fn beta_mom_cases() {
        let p = beta_mom(0.5, 1.0 / 12.0);
        assert!((p.alpha - 1.0).abs() < 1e-12 && (p.beta - 1.0).abs() < 1e-12);
        let p = beta_mom(0.5, 0.05);
        assert!((p.alpha - 2.0).abs() < 1e-12 && (p.beta - 2.0).abs() < 1e-12);
        assert_eq!(beta_mom(0.5, 0.3), BetaParams { alpha: 1.0, beta: 1.0 });
        assert_eq!(beta_mom(0.3, 0.0), BetaParams { alpha: 1.0, beta: 1.0 });
    }

    #[test]
    fn beta_mom_inverts_exact_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let truth = BetaParams::new(rng.random_range(0.1..50.0), rng.random_range(0.1..50.0)).unwrap();
            let fit = beta_mom(truth.mean(), truth.variance());
            assert!((fit.alpha - truth.alpha).abs() < 1e-10 * truth.alpha.max(1.0));
            assert!((fit.beta - truth.beta).abs() < 1e-10 * truth.beta.max(1.0));
        }
    }

    #[test]
    fn dsw_reference_values() {
        let psi = Vector3::new(0.0, 0.6, 0.8);
        let phi = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(dsw_logpdf(&phi, &psi, 0.0).unwrap(), 0.0);
        let v = dsw_logpdf(&psi, &psi, 1.0).unwrap();
        assert!((v - (1.0 - 1.462_651_745_907_181_6f64.ln())).abs() < 1e-12);
        assert!((v - 0.6197).abs() < 1e-4);
        assert!(dsw_logpdf(&Vector3::new(1.0, 1.0, 0.0), &psi, 1.0).is_err());
    }

    #[test]
    fn dsw_antipodal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let psi = Vector3::new(1.0, 2.0, -0.5).normalize();
        for _ in 0..100 {
            let phi = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            )
            .normalize();
            let k = rng.random_range(0.0..100.0);
            assert_eq!(dsw_logpdf(&phi, &psi, k).unwrap(), dsw_logpdf(&-phi, &psi, k).unwrap());
        }
    }

    #[test]
    fn dsw_integrates_to_one_over_sphere() {
        // midpoint rule in (cos θ, azimuth); the density only depends on cos θ
        let psi = Vector3::z();
        for kappa in [0.0, 1.0, 10.0, 100.0] {
            let n_t = 20_000;
            let n_a = 8;
            let mut total = 0.0;
            for i in 0..n_t {
                let t = -1.0 + (i as f64 + 0.5) * 2.0 / n_t as f64;
                for j in 0..n_a {
                    let a = (j as f64 + 0.5) * 2.0 * PI / n_a as f64;
                    let r = (1.0 - t * t).sqrt();
                    let phi = Vector3::new(r * a.cos(), r * a.sin(), t);
                    let dens = dsw_logpdf(&phi, &psi, kappa).unwrap().exp() / (4.0 * PI);
                    total += dens * (2.0 / n_t as f64) * (2.0 * PI / n_a as f64);
                }
            }
            assert!((total - 1.0).abs() < 1e-4, "kappa {kappa}: {total}");
        }
    }

    #[test]
    fn dsw_kappa_gradient_matches_finite_difference() {
        let psi = Vector3::new(0.3, -0.4, 0.5).normalize();
        let phi = Vector3::new(0.2, -0.9, 0.1).normalize();
        for kappa in [0.5f64, 3.0, 25.0, 300.0] {
            let h = 1e-6 * kappa.max(1.0);
            let fd = (dsw_logpdf(&phi, &psi, kappa + h).unwrap()
                - dsw_logpdf(&phi, &psi, kappa - h).unwrap())
                / (2.0 * h);
            let g = dsw_logpdf_dkappa(&phi, &psi, kappa).unwrap();
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "{kappa}: {fd} vs {g}");
        }
    }

    #[test]
    fn sampler_outputs_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kappa in [0.0, 3.0, 80.0, 2000.0] {
            let p = DswParams::new(Vector3::new(1.0, 1.0, 1.0).normalize(), kappa).unwrap();
            for _ in 0..2000 {
                let v = sample_dsw(&p, &mut rng);
                assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampler_second_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kappa in [0.0, 10.0, 120.0] {
            let p = DswParams::new(Vector3::y(), kappa).unwrap();
            let n = 100_000;
            let draws: Vec<f64> = (0..n)
                .map(|_| {
                    let c = sample_dsw(&p, &mut rng).dot(&p.axis);
                    c * c
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let target = kummer_z(kappa).unwrap().dlog_z;
            assert!((mean - target).abs() < 4.0 * se, "kappa {kappa}: {mean} vs {target}");
        }
    }
}
