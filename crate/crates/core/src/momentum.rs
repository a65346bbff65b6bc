//! Recursive momentum trackers for the lower gradient and the hypergradient.
//!
//! Both trackers follow
//!
//! ```text
//! h_t = eta * s(cur) + (1 - eta) * (h_{t-1} + s(cur) - s(prev))
//! ```
//!
//! where `s` is one stochastic sample evaluated at the current and previous
//! iterate with the same draw. It is computed in the algebraically equal form
//! `s(cur) + (1 - eta) * (h_{t-1} - s(prev))`, which makes the correction
//! telescope exactly for deterministic oracles and skips the previous-iterate
//! evaluation altogether when `eta = 1`.

use crate::error::{Error, Result};
use crate::hypergradient::{deterministic_neumann_expectation, estimate, NeumannConfig};
use crate::oracle::{BilevelOracle, ExactOracle, IteratePair};
use crate::sample::{CompositeSample, SampleToken};
use crate::Vector;

/// How the hypergradient tracker obtains its previous-iterate term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EstimatorVariant {
    /// Re-evaluate the current sample at the previous iterate.
    #[default]
    TwoEval,
    /// Single-sample form that also re-evaluates at the previous iterate;
    /// algebraically the same recursion as [`TwoEval`](Self::TwoEval).
    OptionI,
    /// Reuse the previous iteration's own sample value instead of a
    /// re-evaluation, so each step costs one fresh estimator draw.
    OptionII,
}

/// Tracker state for one optimizer run.
#[derive(Clone, Debug)]
pub struct MomentumState {
    h_f: Vector,
    h_g: Vector,
    prev: IteratePair,
    t: u64,
    variant: EstimatorVariant,
    last_f_sample: Option<Vector>,
}

/// Work done by one hypergradient tracker update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct UpdateCost {
    /// Hessian-vector products actually computed, including re-evaluations.
    pub hvps: u64,
    /// Truncation index of the composite sample.
    pub k_drawn: usize,
}

/// Estimator errors against the exact quantities at the current iterate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorErrors {
    pub e_f_norm: f64,
    pub e_g_norm: f64,
    /// Set when the bias could not be computed in closed form and the
    /// hypergradient error is measured against the bias-free surrogate.
    pub approximate: bool,
}

/// Clamps a momentum weight into `[0, 1]`, warning when it had to.
pub fn clamp_eta(eta: f64) -> Result<f64> {
    if eta.is_nan() {
        return Err(Error::NonfiniteValue("momentum weight"));
    }
    if !(0.0..=1.0).contains(&eta) {
        log::warn!("momentum weight {eta} clamped into [0, 1]");
    }
    Ok(eta.clamp(0.0, 1.0))
}

fn ensure_finite(v: &Vector, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonfiniteValue(what))
    }
}

/// `fresh + (1 - eta) * (h_prev - prev_value)`.
fn recurse(fresh: Vector, eta: f64, h_prev: &Vector, prev_value: &Vector) -> Vector {
    fresh + (h_prev - prev_value) * (1.0 - eta)
}

impl MomentumState {
    /// Zero trackers at the zero previous iterate, iteration 0.
    pub fn new(d_up: usize, d_lo: usize, variant: EstimatorVariant) -> Self {
        Self {
            h_f: Vector::zeros(d_up),
            h_g: Vector::zeros(d_lo),
            prev: IteratePair::zeros(d_up, d_lo),
            t: 0,
            variant,
            last_f_sample: None,
        }
    }

    pub fn h_f(&self) -> &Vector {
        &self.h_f
    }

    pub fn h_g(&self) -> &Vector {
        &self.h_g
    }

    pub fn prev_iterate(&self) -> &IteratePair {
        &self.prev
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn variant(&self) -> EstimatorVariant {
        self.variant
    }

    pub fn last_f_sample(&self) -> Option<&Vector> {
        self.last_f_sample.as_ref()
    }

    /// Overrides the stored tracker values; for tests and warm starts.
    pub fn set_trackers(&mut self, h_f: Vector, h_g: Vector) {
        self.h_f = h_f;
        self.h_g = h_g;
    }

    /// Overrides the previous iterate and stored sample; for warm starts.
    pub fn set_history(&mut self, prev: IteratePair, last_f_sample: Option<Vector>, t: u64) {
        self.prev = prev;
        self.last_f_sample = last_f_sample;
        self.t = t;
    }

    fn effective_eta(&self, eta: f64) -> Result<f64> {
        if self.t == 0 {
            Ok(1.0)
        } else {
            clamp_eta(eta)
        }
    }

    /// Lower-level tracker update with sample `zeta` shared by both evaluations.
    pub fn update_g<O: BilevelOracle + ?Sized>(
        &mut self,
        oracle: &O,
        cur: &IteratePair,
        eta_g: f64,
        zeta: SampleToken,
    ) -> Result<&Vector> {
        let eta = self.effective_eta(eta_g)?;
        let fresh = oracle.grad_y_g(cur, zeta);
        let h = if eta == 1.0 {
            fresh
        } else {
            let old = oracle.grad_y_g(&self.prev, zeta);
            recurse(fresh, eta, &self.h_g, &old)
        };
        ensure_finite(&h, "lower tracker")?;
        self.h_g = h;
        Ok(&self.h_g)
    }

    /// Hypergradient tracker update according to the state's variant.
    pub fn update_f<O: BilevelOracle + ?Sized>(
        &mut self,
        oracle: &O,
        cur: &IteratePair,
        eta_f: f64,
        cfg: &NeumannConfig,
        sample: CompositeSample,
    ) -> Result<UpdateCost> {
        let eta = self.effective_eta(eta_f)?;
        let fresh = estimate(oracle, cur, cfg, sample)?;
        let mut cost = UpdateCost {
            hvps: fresh.hvp_count as u64,
            k_drawn: fresh.k_drawn,
        };
        let h = match self.variant {
            EstimatorVariant::TwoEval | EstimatorVariant::OptionI => {
                if eta == 1.0 {
                    fresh.value
                } else {
                    let old = estimate(oracle, &self.prev, cfg, sample)?;
                    cost.hvps += old.hvp_count as u64;
                    recurse(fresh.value, eta, &self.h_f, &old.value)
                }
            }
            EstimatorVariant::OptionII => {
                let h = if eta == 1.0 {
                    fresh.value.clone()
                } else {
                    let last = self.last_f_sample.as_ref().ok_or(Error::MissingHistory)?;
                    recurse(fresh.value.clone(), eta, &self.h_f, last)
                };
                self.last_f_sample = Some(fresh.value);
                h
            }
        };
        ensure_finite(&h, "hypergradient tracker")?;
        self.h_f = h;
        Ok(cost)
    }

    /// Marks `cur` as the iterate the trackers were last updated at.
    pub fn advance(&mut self, cur: &IteratePair) {
        self.prev = cur.clone();
        self.t += 1;
    }

    /// Errors of both trackers at `cur`; see [`estimator_errors`].
    pub fn estimator_errors(
        &self,
        exact: Option<&dyn ExactOracle>,
        cur: &IteratePair,
        cfg: &NeumannConfig,
    ) -> Result<EstimatorErrors> {
        estimator_errors(exact, cur, cfg, &self.h_f, &self.h_g)
    }
}

/// Errors `|h_f - E[estimator]|` and `|h_g - grad_y g|` at `cur`.
///
/// The hypergradient estimate is compared with the estimator expectation:
/// the closed form when the exact oracle has one, otherwise a
/// deterministic-Hessian evaluation from the exact oracle's operators
/// (flagged approximate).
pub fn estimator_errors(
    exact: Option<&dyn ExactOracle>,
    cur: &IteratePair,
    cfg: &NeumannConfig,
    h_f: &Vector,
    h_g: &Vector,
) -> Result<EstimatorErrors> {
    let exact = exact.ok_or(Error::ExactOracleUnavailable)?;
    let (target, approximate) = match exact.neumann_expectation(cur, cfg.k) {
        Some(v) => (v, false),
        None => (deterministic_neumann_expectation(exact, cur, cfg), true),
    };
    Ok(EstimatorErrors {
        e_f_norm: (h_f - target).norm(),
        e_g_norm: (h_g - exact.exact_grad_y_g(cur)).norm(),
        approximate,
    })
}
