//! Step-size and momentum-weight schedules.

use crate::error::{Error, Result};
use crate::hypergradient::{choose_k_nonconvex, choose_k_strongly_convex, lipschitz_l_k};
use crate::oracle::ProblemConstants;

/// Parameters for one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    /// Upper-level step size.
    pub alpha: f64,
    /// Lower-level step size.
    pub beta: f64,
    pub eta_f: f64,
    pub eta_g: f64,
    /// Truncation budget for the hypergradient estimator.
    pub k: usize,
    /// Set when a momentum weight exceeded 1 and was clamped.
    pub eta_clamped: bool,
}

fn clamp_weights(eta_f: f64, eta_g: f64) -> (f64, f64, bool) {
    let clamped = eta_f > 1.0 || eta_g > 1.0;
    if clamped {
        log::warn!("momentum weights ({eta_f}, {eta_g}) clamped to 1");
    }
    (eta_f.min(1.0), eta_g.min(1.0), clamped)
}

/// Constants of the non-convex schedule `alpha_t = (w + t)^(-1/3)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NonconvexScheduleConstants {
    pub w: f64,
    pub c_beta: f64,
    pub c_eta_f: f64,
    pub c_eta_g: f64,
    pub c_bar_eta_f: f64,
    pub c_bar_eta_g: f64,
    pub l_mu_g: f64,
}

/// Computes the non-convex schedule constants from the problem constants and
/// the estimator Lipschitz constant `L_K`.
pub fn nonconvex_constants(c: &ProblemConstants, l_k: f64) -> Result<NonconvexScheduleConstants> {
    c.ensure_valid()?;
    let d = c.derived();
    if d.l == 0.0 {
        return Err(Error::DivisionByZero("L"));
    }
    if d.l_f == 0.0 {
        return Err(Error::DivisionByZero("L_f"));
    }
    if d.l_mu_g == 0.0 {
        return Err(Error::DivisionByZero("L_mu_g"));
    }
    let (mu, lg, l, lmu) = (c.mu_g, c.l_g, d.l, d.l_mu_g);
    let l2 = l * l;
    let c_beta = 6.0 * 2f64.sqrt() * d.l_y * l / lmu;
    let cb2 = c_beta * c_beta;
    let c_bar_eta_f = f64::max(
        36.0 * l_k * l_k,
        4.0 * l_k * l_k * lmu * (mu + lg) * cb2 / l2,
    );
    let c_eta_f = 1.0 / (3.0 * d.l_f) + c_bar_eta_f;
    let c_bar_eta_g = f64::max(36.0 * lg * lg, 4.0 * lg * lg * lmu * (mu + lg) * cb2 / l2);
    let c_eta_g = 1.0 / (3.0 * d.l_f)
        + 8.0 * lg * lg * cb2
        + (8.0 * l2 / (lmu * lmu) + 2.0 * l2 / (lmu * (mu + lg))) * c_bar_eta_g;
    let w = [
        2.0,
        27.0 * d.l_f.powi(3),
        8.0 * (lmu * c_beta).powi(3),
        ((mu + lg) * c_beta).powi(3),
        c_eta_f.powf(1.5),
        c_eta_g.powf(1.5),
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);
    Ok(NonconvexScheduleConstants {
        w,
        c_beta,
        c_eta_f,
        c_eta_g,
        c_bar_eta_f,
        c_bar_eta_g,
        l_mu_g: lmu,
    })
}

/// `alpha_t = (w + t)^(-1/3)`, `beta_t = c_beta alpha_t`, `eta_t = c_eta alpha_t^2`.
pub fn nonconvex_params(consts: &NonconvexScheduleConstants, t: u64, k: usize) -> ScheduleParams {
    let alpha = (consts.w + t as f64).powf(-1.0 / 3.0);
    let a2 = alpha * alpha;
    let (eta_f, eta_g, eta_clamped) = clamp_weights(consts.c_eta_f * a2, consts.c_eta_g * a2);
    ScheduleParams {
        alpha,
        beta: consts.c_beta * alpha,
        eta_f,
        eta_g,
        k,
        eta_clamped,
    }
}

/// `(8 L_y^2 + 8 L^2 + 2 mu_f) / mu_g`.
pub fn strongly_convex_c_beta(c: &ProblemConstants) -> Result<f64> {
    let mu_f = c
        .mu_f
        .ok_or_else(|| Error::InvalidConstants("strongly convex schedule needs mu_f".into()))?;
    let d = c.derived();
    Ok((8.0 * d.l_y * d.l_y + 8.0 * d.l * d.l + 2.0 * mu_f) / c.mu_g)
}

/// The five upper bounds on the constant strongly convex step size.
///
/// Terms whose denominator vanishes impose no bound and are `+inf`.
pub fn strongly_convex_alpha_ceilings(c: &ProblemConstants, l_k: f64) -> Result<[f64; 5]> {
    c.ensure_valid()?;
    let c_hat = strongly_convex_c_beta(c)?;
    let mu_f = c.mu_f.unwrap_or_default();
    let d = c.derived();
    let ratio = |num: f64, den: f64| if den == 0.0 { f64::INFINITY } else { num / den };
    Ok([
        1.0 / (mu_f + 1.0),
        ratio(1.0, 2.0 * c.mu_g * c_hat),
        ratio(c.mu_g, c_hat * c.l_g * c.l_g),
        ratio(1.0, 8.0 * l_k * l_k + d.l_f),
        ratio(
            d.l * d.l + 2.0 * d.l_y * d.l_y,
            4.0 * l_k * l_k * c.l_g * c.l_g * c_hat * c_hat,
        ),
    ])
}

/// Constant strongly convex schedule over horizon `T`.
pub fn strongly_convex_params(
    c: &ProblemConstants,
    l_k: f64,
    horizon: u64,
) -> Result<ScheduleParams> {
    let ceilings = strongly_convex_alpha_ceilings(c, l_k)?;
    let alpha = ceilings.into_iter().fold(f64::INFINITY, f64::min);
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::DivisionByZero("strongly convex step size"));
    }
    let c_hat = strongly_convex_c_beta(c)?;
    let mu_f = c.mu_f.unwrap_or_default();
    let k = choose_k_strongly_convex(c, horizon)?.k;
    Ok(ScheduleParams {
        alpha,
        beta: c_hat * alpha,
        eta_f: (mu_f + 1.0) * alpha,
        eta_g: 1.0,
        k,
        eta_clamped: false,
    })
}

/// Tuned schedule `alpha_t = beta_t = base / (1 + t)^(1/3)`,
/// `eta_t = min(1, c_eta alpha_t^2)`.
pub fn practical_params(
    base_alpha: f64,
    t: u64,
    c_eta_f: f64,
    c_eta_g: f64,
    k: usize,
) -> ScheduleParams {
    let alpha = base_alpha / (1.0 + t as f64).cbrt();
    let a2 = alpha * alpha;
    if c_eta_f == 0.0 || c_eta_g == 0.0 {
        log::debug!("zero momentum weight: pure recursive correction");
    }
    let (eta_f, eta_g, _) = clamp_weights(c_eta_f * a2, c_eta_g * a2);
    ScheduleParams {
        alpha,
        beta: alpha,
        eta_f,
        eta_g,
        k,
        eta_clamped: false,
    }
}

/// A schedule producing [`ScheduleParams`] for every iteration.
#[derive(Clone, Debug, PartialEq)]
pub enum SchedulePolicy {
    /// Decaying non-convex schedule.
    Nonconvex {
        consts: NonconvexScheduleConstants,
        k: usize,
    },
    /// Constant strongly convex schedule; `params.alpha` may be a scaled copy
    /// of the theoretical value.
    StronglyConvex { params: ScheduleParams },
    Practical {
        base_alpha: f64,
        c_eta_f: f64,
        c_eta_g: f64,
        k: usize,
    },
    /// Fixed parameters for every iteration.
    Constant { params: ScheduleParams },
}

impl SchedulePolicy {
    /// Non-convex schedule for horizon `T`. Without an explicit budget,
    /// `K` comes from the non-convex selection rule.
    pub fn nonconvex(c: &ProblemConstants, horizon: u64, k: Option<usize>) -> Result<Self> {
        let k = match k {
            Some(k) => k.max(1),
            None => choose_k_nonconvex(c, horizon)?.k,
        };
        let l_k = lipschitz_l_k(c, k)?;
        Ok(Self::Nonconvex {
            consts: nonconvex_constants(c, l_k)?,
            k,
        })
    }

    /// Strongly convex schedule with its step sizes multiplied by `alpha_scale`.
    ///
    /// `beta` and `eta_f` keep their fixed ratio to `alpha`.
    pub fn strongly_convex(
        c: &ProblemConstants,
        horizon: u64,
        alpha_scale: f64,
        k: Option<usize>,
    ) -> Result<Self> {
        let k = match k {
            Some(k) => k.max(1),
            None => choose_k_strongly_convex(c, horizon)?.k,
        };
        let l_k = lipschitz_l_k(c, k)?;
        let mut params = strongly_convex_params(c, l_k, horizon)?;
        params.k = k;
        params.alpha *= alpha_scale;
        params.beta *= alpha_scale;
        params.eta_f = (params.eta_f * alpha_scale).min(1.0);
        Ok(Self::StronglyConvex { params })
    }

    /// Practical schedule. Without an explicit budget, `K` comes from the
    /// non-convex selection rule with horizon `T`.
    pub fn practical(
        c: &ProblemConstants,
        horizon: u64,
        base_alpha: f64,
        c_eta_f: f64,
        c_eta_g: f64,
        k: Option<usize>,
    ) -> Result<Self> {
        if !(base_alpha > 0.0) {
            return Err(Error::InvalidConfig("base_alpha must be positive".into()));
        }
        let k = match k {
            Some(k) => k.max(1),
            None => choose_k_nonconvex(c, horizon)?.k,
        };
        Ok(Self::Practical {
            base_alpha,
            c_eta_f,
            c_eta_g,
            k,
        })
    }

    pub fn params(&self, t: u64) -> ScheduleParams {
        match self {
            Self::Nonconvex { consts, k } => nonconvex_params(consts, t, *k),
            Self::StronglyConvex { params } | Self::Constant { params } => *params,
            Self::Practical {
                base_alpha,
                c_eta_f,
                c_eta_g,
                k,
            } => practical_params(*base_alpha, t, *c_eta_f, *c_eta_g, *k),
        }
    }
}
