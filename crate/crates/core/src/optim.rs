//! Nonlinear conjugate gradient (Polak-Ribière+) with backtracking Armijo line
//! search and optional box constraints handled by projection.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CgOptions {
    pub max_iter: usize,
    /// Stop once `‖projected gradient‖∞ ≤ grad_tol · ‖initial gradient‖∞`.
    pub grad_tol: f64,
    /// Also stop once `‖projected gradient‖∞ ≤ abs_tol`.
    pub abs_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-6,
            abs_tol: 0.0,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

impl CgOptions {
    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_grad_tol(mut self, grad_tol: f64) -> Self {
        self.grad_tol = grad_tol;
        self
    }

    pub fn with_abs_tol(mut self, abs_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self
    }
}

/// Per-coordinate box constraints; use infinities for free coordinates.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn lower(lower: Vec<f64>) -> Self {
        let upper = vec![f64::INFINITY; lower.len()];
        Self { lower, upper }
    }

    fn project(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            let c = v.clamp(lo, hi);
            if c != *v {
                *v = c;
                moved = true;
            }
        }
        moved
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Zeroes gradient components that point out of the feasible box at active bounds.
fn projected_gradient(x: &[f64], g: &[f64], bounds: Option<&Bounds>, out: &mut [f64]) {
    out.copy_from_slice(g);
    if let Some(b) = bounds {
        for i in 0..x.len() {
            if (x[i] <= b.lower[i] && g[i] > 0.0) || (x[i] >= b.upper[i] && g[i] < 0.0) {
                out[i] = 0.0;
            }
        }
    }
}

/// Minimizes `objective`, which writes the gradient into its second argument
/// and returns the value.
pub fn minimize_cg<F>(
    mut objective: F,
    x0: &[f64],
    bounds: Option<&Bounds>,
    opts: &CgOptions,
) -> Result<CgResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    if let Some(b) = bounds {
        if b.lower.len() != n || b.upper.len() != n {
            return Err(Error::Optimizer("bounds do not match the parameter dimension".into()));
        }
    }
    let mut x = x0.to_vec();
    if let Some(b) = bounds {
        b.project(&mut x);
    }
    let mut g = vec![0.0; n];
    let mut fx = objective(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimizer(format!("objective is not finite at the start point ({fx})")));
    }
    let mut trace = vec![fx];
    let mut pg = vec![0.0; n];
    projected_gradient(&x, &g, bounds, &mut pg);
    let tol = (opts.grad_tol * inf_norm(&pg)).max(opts.abs_tol);

    let mut d = vec![0.0; n];
    let mut pg_prev = vec![0.0; n];
    let mut restart = true;
    let mut prev_slope = 0.0;
    let mut prev_step = 0.0;
    let mut x_trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let gnorm = inf_norm(&pg);
        if gnorm == 0.0 || gnorm <= tol {
            converged = true;
            break;
        }
        iterations += 1;

        if restart {
            d.iter_mut().zip(&pg).for_each(|(di, gi)| *di = -gi);
        } else {
            let denom = dot(&pg_prev, &pg_prev);
            let beta = if denom > 0.0 {
                (dot(&pg, &pg) - dot(&pg, &pg_prev)) / denom
            } else {
                0.0
            }
            .max(0.0);
            d.iter_mut().zip(&pg).for_each(|(di, gi)| *di = -gi + beta * *di);
        }
        if let Some(b) = bounds {
            for i in 0..n {
                if (x[i] <= b.lower[i] && d[i] < 0.0) || (x[i] >= b.upper[i] && d[i] > 0.0) {
                    d[i] = 0.0;
                }
            }
        }
        let mut slope = dot(&pg, &d);
        if !(slope < 0.0) {
            d.iter_mut().zip(&pg).for_each(|(di, gi)| *di = -gi);
            slope = dot(&pg, &d);
        }

        let mut step = if restart || prev_step == 0.0 {
            (1.0 / inf_norm(&d)).min(1.0)
        } else {
            (prev_step * prev_slope / slope).clamp(1e-20, 1e20)
        };

        let mut accepted: Option<(f64, bool)> = None;
        let mut saw_finite = false;
        for _ in 0..opts.max_backtracks {
            let (f_new, projected) = try_step(&mut objective, &x, &d, step, bounds, &mut x_trial, &mut g_trial);
            match f_new {
                Some(f) if f.is_finite() => {
                    saw_finite = true;
                    if armijo(fx, f, &g, &x, &x_trial, opts.c1) {
                        accepted = Some((f, projected));
                        break;
                    }
                }
                _ => {}
            }
            step *= opts.shrink;
        }
        let Some((mut f_new, mut projected)) = accepted else {
            if !saw_finite {
                return Err(Error::Optimizer("objective non-finite along the search direction".into()));
            }
            if restart {
                // no descent possible even along the steepest direction
                break;
            }
            restart = true;
            continue;
        };

        // expand while the first trial keeps paying off
        let mut best_x = x_trial.clone();
        let mut best_g = g_trial.clone();
        if !projected {
            for _ in 0..30 {
                let bigger = step * 2.0;
                let (f_try, proj) = try_step(&mut objective, &x, &d, bigger, bounds, &mut x_trial, &mut g_trial);
                match f_try {
                    Some(f) if f.is_finite() && f < f_new && armijo(fx, f, &g, &x, &x_trial, opts.c1) => {
                        step = bigger;
                        f_new = f;
                        projected = proj;
                        best_x.copy_from_slice(&x_trial);
                        best_g.copy_from_slice(&g_trial);
                        if proj {
                            break;
                        }
                    }
                    _ => break,
                }
            }
        }

        let moved = best_x != x;
        prev_step = step;
        prev_slope = slope;
        pg_prev.copy_from_slice(&pg);
        x = best_x;
        g = best_g;
        fx = f_new;
        trace.push(fx);
        projected_gradient(&x, &g, bounds, &mut pg);
        restart = projected;
        if !moved {
            break;
        }
    }
    if !converged {
        let gnorm = inf_norm(&pg);
        converged = gnorm == 0.0 || gnorm <= tol;
    }
    Ok(CgResult {
        x,
        value: fx,
        trace,
        iterations,
        converged,
    })
}

fn try_step<F>(
    objective: &mut F,
    x: &[f64],
    d: &[f64],
    step: f64,
    bounds: Option<&Bounds>,
    x_trial: &mut [f64],
    g_trial: &mut [f64],
) -> (Option<f64>, bool)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    for i in 0..x.len() {
        x_trial[i] = x[i] + step * d[i];
    }
    let projected = bounds.map(|b| b.project(x_trial)).unwrap_or(false);
    let f = objective(x_trial, g_trial);
    if g_trial.iter().any(|v| !v.is_finite()) {
        return (None, projected);
    }
    (Some(f), projected)
}

fn armijo(fx: f64, f_new: f64, g: &[f64], x: &[f64], x_new: &[f64], c1: f64) -> bool {
    let decrease: f64 = g.iter().zip(x_new.iter().zip(x)).map(|(gi, (a, b))| gi * (a - b)).sum();
    f_new <= fx + c1 * decrease && f_new <= fx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(q: &[[f64; 5]; 5]) -> impl FnMut(&[f64], &mut [f64]) -> f64 + '_ {
        move |x, g| {
            let mut f = 0.0;
            for i in 0..5 {
                g[i] = (0..5).map(|j| q[i][j] * x[j]).sum();
                f += 0.5 * x[i] * g[i];
            }
            f
        }
    }

    const Q: [[f64; 5]; 5] = [
        [4.0, 1.0, 0.0, 0.0, 0.5],
        [1.0, 3.0, 0.2, 0.0, 0.0],
        [0.0, 0.2, 2.0, 0.3, 0.0],
        [0.0, 0.0, 0.3, 5.0, 0.1],
        [0.5, 0.0, 0.0, 0.1, 1.0],
    ];

    #[test]
    fn quadratic_converges() {
        let r = minimize_cg(
            quadratic(&Q),
            &[1.0, -2.0, 0.5, 3.0, -1.0],
            None,
            &CgOptions::default().with_grad_tol(1e-12).with_max_iter(500),
        )
        .unwrap();
        assert!(r.converged);
        assert!(r.value < 1e-10, "{}", r.value);
        assert!(r.x.iter().all(|v| v.abs() < 1e-6));
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let rosen = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let r = minimize_cg(
            rosen,
            &[-1.2, 1.0],
            None,
            &CgOptions::default().with_grad_tol(1e-14).with_max_iter(20_000),
        )
        .unwrap();
        assert!(r.value < 1e-8, "f = {}", r.value);
        assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn stationary_start_is_returned_unchanged() {
        let r = minimize_cg(quadratic(&Q), &[0.0; 5], None, &CgOptions::default()).unwrap();
        assert_eq!(r.x, vec![0.0; 5]);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn bounds_are_respected_exactly() {
        // minimum at (-1, 2), lower bound 0 on x0
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] + 1.0);
            g[1] = 2.0 * (x[1] - 2.0);
            (x[0] + 1.0).powi(2) + (x[1] - 2.0).powi(2)
        };
        let b = Bounds {
            lower: vec![0.0, f64::NEG_INFINITY],
            upper: vec![f64::INFINITY, 1.5],
        };
        let r = minimize_cg(f, &[3.0, -4.0], Some(&b), &CgOptions::default().with_grad_tol(1e-10)).unwrap();
        assert_eq!(r.x[0], 0.0);
        assert_eq!(r.x[1], 1.5);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let f = |_: &[f64], g: &mut [f64]| {
            g[0] = 0.0;
            f64::NAN
        };
        assert!(matches!(
            minimize_cg(f, &[1.0], None, &CgOptions::default()),
            Err(Error::Optimizer(_))
        ));
    }

    #[test]
    fn non_finite_region_is_avoided_by_shrinking() {
        // log barrier: infinite for x <= 0, minimum at x = 1
        let f = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                g[0] = f64::NAN;
                return f64::INFINITY;
            }
            g[0] = 1.0 - 1.0 / x[0];
            x[0] - x[0].ln()
        };
        let r = minimize_cg(f, &[20.0], None, &CgOptions::default().with_grad_tol(1e-10)).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6);
    }
}
