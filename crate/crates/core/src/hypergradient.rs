//! Stochastic hypergradient via a randomized truncated Neumann series.
//!
//! One draw evaluates
//!
//! ```text
//! grad_x f(xi) - (K / L_g) * H_xy(zeta_0) * prod_{i=1..k} (I - H_yy(zeta_i) / L_g) * grad_y f(xi)
//! ```
//!
//! with `k` uniform on `{0, ..., K-1}`. The product is applied right-to-left
//! as Hessian-vector products; no matrix is formed.

use crate::error::{Error, Result};
use crate::oracle::{BilevelOracle, ExactOracle, IteratePair, ProblemConstants};
use crate::sample::CompositeSample;
use crate::Vector;

/// Truncation budget and the scaling taken from the lower-level constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeumannConfig {
    pub k: usize,
    pub l_g: f64,
    pub mu_g: f64,
}

impl NeumannConfig {
    pub fn new(k: usize, constants: &ProblemConstants) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConstants(
                "truncation budget K must be at least 1".into(),
            ));
        }
        if !(constants.l_g > 0.0 && constants.l_g.is_finite()) {
            return Err(Error::InvalidConstants(
                "L_g must be positive and finite".into(),
            ));
        }
        Ok(Self {
            k,
            l_g: constants.l_g,
            mu_g: constants.mu_g,
        })
    }
}

/// One estimator draw.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperGradSample {
    pub value: Vector,
    /// Number of Neumann factors applied, in `0..K`.
    pub k_drawn: usize,
    /// Hessian-vector products consumed: `k_drawn + 1`.
    pub hvp_count: usize,
}

fn ensure_finite(v: &Vector, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonfiniteValue(what))
    }
}

/// Draws the hypergradient estimator at `at` with the composite sample `sample`.
///
/// Re-evaluating the same composite sample at another iterate reuses the same
/// truncation index and the same underlying draws.
pub fn estimate<O: BilevelOracle + ?Sized>(
    oracle: &O,
    at: &IteratePair,
    cfg: &NeumannConfig,
    sample: CompositeSample,
) -> Result<HyperGradSample> {
    oracle.check_dims(at)?;
    let k = sample.draw_index(cfg.k);
    let (gx, gy) = oracle.grad_f(at, sample.upper());
    ensure_finite(&gx, "grad_x f")?;
    ensure_finite(&gy, "grad_y f")?;

    let inv_l = 1.0 / cfg.l_g;
    let mut v = gy;
    for i in 1..=k {
        let hv = oracle.hess_yy_g_apply(at, sample.hessian(i), &v);
        v -= hv * inv_l;
        ensure_finite(&v, "Neumann product")?;
    }
    let cross = oracle.hess_xy_g_apply(at, sample.cross(), &v);
    let value = gx - cross * (cfg.k as f64 / cfg.l_g);
    ensure_finite(&value, "hypergradient")?;
    Ok(HyperGradSample {
        value,
        k_drawn: k,
        hvp_count: k + 1,
    })
}

/// Expectation of [`estimate`] on a problem whose Hessians are deterministic,
/// from the exact gradients and Hessian actions.
///
/// Uses `K` exact lower Hessian products; intended for verification only.
pub fn deterministic_neumann_expectation<E: ExactOracle + ?Sized>(
    exact: &E,
    at: &IteratePair,
    cfg: &NeumannConfig,
) -> Vector {
    let (gx, gy) = exact.exact_grad_f(at);
    let inv_l = 1.0 / cfg.l_g;
    let mut term = gy.clone();
    let mut sum = gy;
    for _ in 1..cfg.k {
        let hv = exact.exact_hess_yy_g_apply(at, &term);
        term -= hv * inv_l;
        sum += &term;
    }
    let avg = if cfg.k == 1 { sum } else { sum / cfg.k as f64 };
    let cross = exact.exact_hess_xy_g_apply(at, &avg);
    gx - cross * (cfg.k as f64 / cfg.l_g)
}

/// Bound `(C_gxy C_fy / mu_g) (1 - mu_g / L_g)^K` on the estimator bias.
pub fn bias_bound(c: &ProblemConstants, k: usize) -> Result<f64> {
    c.ensure_valid()?;
    Ok(c.c_gxy * c.c_fy / c.mu_g * c.contraction().powi(k as i32))
}

/// A truncation budget together with whether the logarithm argument was
/// already at most one, in which case `K = 1` suffices trivially.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KChoice {
    pub k: usize,
    pub degenerate: bool,
}

fn k_from_log(scale: f64, arg: f64) -> KChoice {
    if !(arg > 1.0) {
        return KChoice {
            k: 1,
            degenerate: true,
        };
    }
    let k = (scale * arg.ln()).ceil();
    KChoice {
        k: if k < 1.0 { 1 } else { k as usize },
        degenerate: false,
    }
}

/// Budget for the non-convex rate: `ceil((L_g / mu_g) ln(C_gxy C_fy T / mu_g))`,
/// which keeps the bias bound at most `1 / T`.
pub fn choose_k_nonconvex(c: &ProblemConstants, horizon: u64) -> Result<KChoice> {
    c.ensure_valid()?;
    let horizon = horizon.max(1) as f64;
    Ok(k_from_log(
        c.l_g / c.mu_g,
        c.c_gxy * c.c_fy * horizon / c.mu_g,
    ))
}

/// Budget for the strongly convex rate:
/// `ceil((L_g / 2 mu_g) ln(C_gxy^2 C_fy^2 T / mu_g^2))`, so the squared bias
/// bound is at most `1 / T`.
pub fn choose_k_strongly_convex(c: &ProblemConstants, horizon: u64) -> Result<KChoice> {
    c.ensure_valid()?;
    let horizon = horizon.max(1) as f64;
    let num = c.c_gxy * c.c_fy;
    Ok(k_from_log(
        c.l_g / (2.0 * c.mu_g),
        num * num * horizon / (c.mu_g * c.mu_g),
    ))
}

/// Lipschitz constant `L_K` of the estimator under coupled samples.
///
/// At `mu_g = L_g` the cubic term is singular unless its numerator vanishes.
pub fn lipschitz_l_k(c: &ProblemConstants, k: usize) -> Result<f64> {
    c.ensure_valid()?;
    let kf = k as f64;
    let (mu, lg) = (c.mu_g, c.l_g);
    let denom = 2.0 * mu * lg - mu * mu;
    let cubic_num = c.c_gxy * c.c_fy * c.l_gyy;
    let cubic = if cubic_num == 0.0 {
        0.0
    } else if lg == mu {
        return Err(Error::SingularDenominator);
    } else {
        6.0 * cubic_num * cubic_num * kf.powi(3) / ((lg - mu).powi(2) * denom)
    };
    let sum = 2.0 * c.l_fx * c.l_fx
        + 6.0 * (c.c_gxy * c.l_fy).powi(2) * kf / denom
        + 6.0 * (c.c_fy * c.l_gxy).powi(2) * kf / denom
        + cubic;
    Ok(sum.sqrt())
}
