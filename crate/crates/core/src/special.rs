//! Special functions: log-gamma, digamma, log-Beta and the Kummer-type
//! partition function `Z(k) = ∫₀¹ exp(k t²) dt` of the Watson distribution.

use std::sync::LazyLock;

use crate::error::{Error, Result};

/// Largest concentration accepted by [`kummer_z`].
pub const KAPPA_MAX: f64 = 5000.0;

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    statrs::function::gamma::digamma(x)
}

/// `log B(a, b)`; both arguments must be strictly positive and finite.
pub fn log_beta_fn(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::Domain(format!("log Beta needs positive arguments, got ({a}, {b})")));
    }
    Ok(ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b))
}

/// Gauss-Legendre nodes and weights mapped to [0, 1].
#[derive(Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
                }
                dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            // map [-1, 1] -> [0, 1]
            nodes[i] = 0.5 * (1.0 - z);
            nodes[n - 1 - i] = 0.5 * (1.0 + z);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        Self { nodes, weights }
    }
}

static GL32: LazyLock<GaussLegendre> = LazyLock::new(|| GaussLegendre::new(32));
static GL64: LazyLock<GaussLegendre> = LazyLock::new(|| GaussLegendre::new(64));
static GL128: LazyLock<GaussLegendre> = LazyLock::new(|| GaussLegendre::new(128));

/// `log Z(k)` together with its derivative `d log Z / dk = E[t²]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KummerZ {
    pub log_z: f64,
    pub dlog_z: f64,
}

/// Accumulates ∫ exp(k(t²-1)) and ∫ t² exp(k(t²-1)) over [lo, hi].
#[inline]
fn panel(rule: &GaussLegendre, kappa: f64, lo: f64, hi: f64, acc: &mut (f64, f64)) {
    let width = hi - lo;
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let t = lo + width * x;
        let t2 = t * t;
        let e = w * width * (kappa * (t2 - 1.0)).exp();
        acc.0 += e;
        acc.1 += t2 * e;
    }
}

/// Unchecked evaluation; `kappa` must lie in `[0, KAPPA_MAX]`.
pub(crate) fn kummer_unchecked(kappa: f64) -> KummerZ {
    if kappa == 0.0 {
        return KummerZ {
            log_z: 0.0,
            dlog_z: 1.0 / 3.0,
        };
    }
    let mut acc = (0.0, 0.0);
    if kappa <= 200.0 {
        panel(&GL64, kappa, 0.0, 1.0, &mut acc);
    } else if kappa <= 1000.0 {
        panel(&GL128, kappa, 0.0, 1.0, &mut acc);
    } else {
        // Beyond k = 1000 the mass concentrates within ~1/k of t = 1; grade
        // panels geometrically toward the endpoint.
        let mut lo = 0.0;
        let mut width = 0.5;
        while width * kappa > 0.125 {
            panel(&GL32, kappa, lo, lo + width, &mut acc);
            lo += width;
            width *= 0.5;
        }
        panel(&GL32, kappa, lo, 1.0, &mut acc);
    }
    KummerZ {
        log_z: kappa + acc.0.ln(),
        dlog_z: acc.1 / acc.0,
    }
}

/// Power series below `SERIES_LIMIT`, endpoint asymptotic expansion above.
/// Much cheaper than quadrature; used inside per-voxel loops.
const SERIES_LIMIT: f64 = 40.0;
const SERIES_TERMS: usize = 160;

/// `[1/k, 1/(2k+1), 1/(2k+3)]`
static SERIES_RECIPROCALS: LazyLock<Vec<[f64; 3]>> = LazyLock::new(|| {
    (0..SERIES_TERMS)
        .map(|k| {
            let k = k as f64;
            [1.0 / k, 1.0 / (2.0 * k + 1.0), 1.0 / (2.0 * k + 3.0)]
        })
        .collect()
});

pub(crate) fn kummer_fast(kappa: f64) -> KummerZ {
    if kappa == 0.0 {
        return KummerZ {
            log_z: 0.0,
            dlog_z: 1.0 / 3.0,
        };
    }
    if kappa <= SERIES_LIMIT {
        // Z = Σ κ^k / (k! (2k+1)),  Z' = Σ κ^k / (k! (2k+3))
        let r = &*SERIES_RECIPROCALS;
        let mut term = 1.0;
        let mut z = 1.0;
        let mut dz = 1.0 / 3.0;
        for k in 1..SERIES_TERMS {
            let [inv_k, inv_odd, inv_odd2] = r[k];
            term *= kappa * inv_k;
            let a = term * inv_odd;
            z += a;
            dz += term * inv_odd2;
            if a < 1e-17 * z && k as f64 > kappa {
                break;
            }
        }
        return KummerZ {
            log_z: z.ln(),
            dlog_z: dz / z,
        };
    }
    // Z = e^κ/(2κ) Σ (2k-1)!!/(2κ)^k
    let mut a = 1.0;
    let mut s = 1.0;
    let mut k = 0.0;
    loop {
        k += 1.0;
        let next = a * (2.0 * k - 1.0) / (2.0 * kappa);
        if next < 1e-17 || next > a {
            break;
        }
        a = next;
        s += a;
    }
    KummerZ {
        log_z: kappa - (2.0 * kappa).ln() + s.ln(),
        dlog_z: 1.0 / s - 1.0 / (2.0 * kappa),
    }
}

/// Partition function of the Watson distribution in shifted form,
/// `log Z(k) = k + log ∫₀¹ exp(k(t²-1)) dt`, and its derivative.
pub fn kummer_z(kappa: f64) -> Result<KummerZ> {
    if !(0.0..=KAPPA_MAX).contains(&kappa) {
        return Err(Error::Domain(format!(
            "concentration {kappa} outside [0, {KAPPA_MAX}]"
        )));
    }
    Ok(kummer_unchecked(kappa))
}
