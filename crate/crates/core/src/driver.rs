//! The optimizer loop and baseline methods.
//!
//! Every method draws its samples from the same addressed stream: iteration
//! `t` uses lower samples `lower(t, j)` and the composite hypergradient sample
//! `composite(t)`, so runs with the same seed are directly comparable.

use crate::error::{Error, Result};
use crate::hypergradient::{estimate, NeumannConfig};
use crate::momentum::{estimator_errors, EstimatorVariant, MomentumState};
use crate::oracle::{BilevelOracle, ExactOracle, IteratePair};
use crate::sample::SampleStream;
use crate::schedules::{ScheduleParams, SchedulePolicy};
use crate::Vector;

/// How the upper-level step direction is formed from the tracker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    Plain,
    Adam,
}

/// Adam moment estimates for the upper-level direction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vector,
    pub v: Vector,
    pub gamma1: f64,
    pub gamma2: f64,
    pub eps: f64,
    /// Step counter, starting at 1.
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: Vector::zeros(dim),
            v: Vector::zeros(dim),
            gamma1: 0.9,
            gamma2: 0.999,
            eps: 1e-8,
            t: 1,
        }
    }
}

/// Bias-corrected Adam direction for `h`; advances the step counter.
pub fn adam_direction(state: &mut AdamState, h: &Vector) -> Vector {
    let (g1, g2) = (state.gamma1, state.gamma2);
    state.m = &state.m * g1 + h * (1.0 - g1);
    state.v = &state.v * g2 + h.component_mul(h) * (1.0 - g2);
    let c1 = 1.0 - g1.powi(state.t as i32);
    let c2 = 1.0 - g2.powi(state.t as i32);
    state.t += 1;
    state
        .m
        .zip_map(&state.v, |m, v| (m / c1) / ((v / c2).sqrt() + state.eps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub horizon: u64,
    pub policy: SchedulePolicy,
    pub variant: EstimatorVariant,
    pub direction: Direction,
    pub seed: u64,
    /// Record every `metric_stride` iterations, plus the last one.
    pub metric_stride: u64,
    pub initial: IteratePair,
}

impl RunConfig {
    pub fn new(horizon: u64, policy: SchedulePolicy, initial: IteratePair, seed: u64) -> Self {
        Self {
            horizon,
            policy,
            variant: EstimatorVariant::TwoEval,
            direction: Direction::Plain,
            seed,
            metric_stride: 1,
            initial,
        }
    }

    pub fn with_stride(mut self, stride: u64) -> Self {
        self.metric_stride = stride;
        self
    }

    pub fn with_variant(mut self, variant: EstimatorVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }
}

/// Metrics at iterate `(x_t, y_t)`, taken after the estimates of iteration
/// `t` are formed and before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub t: u64,
    pub alpha: f64,
    pub beta: f64,
    pub eta_f: f64,
    pub eta_g: f64,
    /// `|grad l(x_t)|^2`, when an exact oracle is available.
    pub grad_ell_sq: Option<f64>,
    /// `l(x_t) - l*`, when the optimal value is known.
    pub ell_gap: Option<f64>,
    /// `|y_t - y*(x_t)|^2`.
    pub tracking_sq: Option<f64>,
    pub e_f_norm: Option<f64>,
    pub e_g_norm: Option<f64>,
    /// Full-batch upper objective `f(x_t, y_t)`, when the oracle provides it.
    pub upper_loss: Option<f64>,
    /// Upper plus lower sample draws up to and including iteration `t`.
    pub cumulative_samples: u64,
    pub cumulative_hvps: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// `x_a` with `a` uniform on `{1, ..., T}`; the last finite upper iterate
    /// when the run aborted before reaching it.
    pub returned: Vector,
    pub output_index: usize,
    pub final_iterate: IteratePair,
    pub records: Vec<TrajectoryRecord>,
    /// Error that stopped the run early, if any.
    pub aborted: Option<Error>,
    /// Iterations completed.
    pub iterations: u64,
    pub total_samples: u64,
    pub total_hvps: u64,
}

/// Baseline methods sharing the hypergradient estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineKind {
    /// One stochastic gradient step per level, both at `(x_t, y_t)`.
    AlternatingSgd,
    /// Alternating steps with `alpha_t = alpha_0 / (1 + t)^(3/5)` and
    /// `beta_t = ratio * alpha_t^(2/3)`, so `beta_t / alpha_t` diverges.
    TwoTimescale { ratio: f64 },
    /// `inner - 1` lower-level steps, then one alternating step from the
    /// refined lower iterate.
    DoubleLoop { inner: usize },
}

/// Algorithm choice for [`run`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Algorithm {
    Sustain,
    Baseline(BaselineKind),
}

/// Result of one iteration's estimation phase.
struct Step {
    h_f: Vector,
    h_g: Vector,
    /// Point at which the estimates were formed.
    eval: Option<IteratePair>,
    next: IteratePair,
    params: ScheduleParams,
    samples: u64,
    hvps: u64,
}

fn descend(v: &Vector, h: &Vector, rate: f64) -> Vector {
    v - h * rate
}

fn ensure_finite(v: &Vector, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonfiniteValue(what))
    }
}

fn composite_samples(k: usize) -> u64 {
    k as u64 + 3
}

fn validate<O: BilevelOracle + ?Sized>(oracle: &O, cfg: &RunConfig) -> Result<()> {
    if cfg.horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    if cfg.metric_stride == 0 {
        return Err(Error::InvalidConfig(
            "metric_stride must be at least 1".into(),
        ));
    }
    oracle.check_dims(&cfg.initial)
}

#[allow(clippy::too_many_arguments)]
fn record<O: BilevelOracle + ?Sized>(
    oracle: &O,
    exact: Option<&dyn ExactOracle>,
    t: u64,
    cur: &IteratePair,
    step: &Step,
    ncfg: &NeumannConfig,
    samples: u64,
    hvps: u64,
) -> TrajectoryRecord {
    let mut r = TrajectoryRecord {
        t,
        alpha: step.params.alpha,
        beta: step.params.beta,
        eta_f: step.params.eta_f,
        eta_g: step.params.eta_g,
        grad_ell_sq: None,
        ell_gap: None,
        tracking_sq: None,
        e_f_norm: None,
        e_g_norm: None,
        upper_loss: oracle.upper_value(cur),
        cumulative_samples: samples,
        cumulative_hvps: hvps,
    };
    if let Some(ex) = exact {
        r.grad_ell_sq = Some(ex.grad_ell(&cur.x).norm_squared());
        r.ell_gap = ex.ell_star().map(|s| ex.ell(&cur.x) - s);
        r.tracking_sq = Some((&cur.y - ex.y_star(&cur.x)).norm_squared());
        let at = step.eval.as_ref().unwrap_or(cur);
        if let Ok(e) = estimator_errors(exact, at, ncfg, &step.h_f, &step.h_g) {
            r.e_f_norm = Some(e.e_f_norm);
            r.e_g_norm = Some(e.e_g_norm);
        }
    }
    r
}

/// Shared loop: bookkeeping, records, the returned iterate and aborts.
fn drive<O, F>(
    oracle: &O,
    exact: Option<&dyn ExactOracle>,
    cfg: &RunConfig,
    mut step_fn: F,
) -> Result<RunOutput>
where
    O: BilevelOracle + ?Sized,
    F: FnMut(u64, &IteratePair) -> Result<Step>,
{
    validate(oracle, cfg)?;
    let stream = SampleStream::new(cfg.seed);
    // Drawn from its own substream, so the draw time does not matter.
    let output_index = stream.output_index(cfg.horizon as usize);
    let mut cur = cfg.initial.clone();
    let mut returned = None;
    let mut records = Vec::new();
    let mut samples = 0u64;
    let mut hvps = 0u64;
    let mut aborted = None;
    let mut iterations = 0;

    for t in 0..cfg.horizon {
        let step = match step_fn(t, &cur) {
            Ok(s) => s,
            Err(e @ Error::NonfiniteValue(_)) => {
                aborted = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        samples += step.samples;
        hvps += step.hvps;
        if t % cfg.metric_stride == 0 || t + 1 == cfg.horizon {
            let ncfg = NeumannConfig::new(step.params.k, oracle.constants())?;
            records.push(record(oracle, exact, t, &cur, &step, &ncfg, samples, hvps));
        }
        if !step.next.is_finite() {
            aborted = Some(Error::NonfiniteValue("iterate"));
            break;
        }
        cur = step.next;
        iterations = t + 1;
        if t + 1 == output_index as u64 {
            returned = Some(cur.x.clone());
        }
    }
    Ok(RunOutput {
        returned: returned.unwrap_or_else(|| cur.x.clone()),
        output_index,
        final_iterate: cur,
        records,
        aborted,
        iterations,
        total_samples: samples,
        total_hvps: hvps,
    })
}

/// Runs the double-momentum method for `cfg.horizon` iterations.
///
/// Both trackers are formed at `(x_t, y_t)` before either level is updated.
/// The momentum weights are forced to 1 at `t = 0`.
pub fn run_sustain<O: BilevelOracle + ?Sized>(
    oracle: &O,
    exact: Option<&dyn ExactOracle>,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    let stream = SampleStream::new(cfg.seed);
    let mut state = MomentumState::new(oracle.dim_upper(), oracle.dim_lower(), cfg.variant);
    let mut adam = AdamState::new(oracle.dim_upper());
    let constants = oracle.constants().clone();
    drive(oracle, exact, cfg, |t, cur| {
        let mut params = cfg.policy.params(t);
        if t == 0 {
            params.eta_f = 1.0;
            params.eta_g = 1.0;
        }
        let ncfg = NeumannConfig::new(params.k, &constants)?;
        state.update_g(oracle, cur, params.eta_g, stream.lower(t, 0))?;
        let cost = state.update_f(oracle, cur, params.eta_f, &ncfg, stream.composite(t))?;
        let dir = match cfg.direction {
            Direction::Plain => None,
            Direction::Adam => Some(adam_direction(&mut adam, state.h_f())),
        };
        let next = IteratePair {
            x: descend(&cur.x, dir.as_ref().unwrap_or(state.h_f()), params.alpha),
            y: descend(&cur.y, state.h_g(), params.beta),
        };
        state.advance(cur);
        Ok(Step {
            h_f: state.h_f().clone(),
            h_g: state.h_g().clone(),
            eval: None,
            next,
            params,
            samples: 1 + composite_samples(params.k),
            hvps: cost.hvps,
        })
    })
}

/// Runs a baseline method with the same sample layout as [`run_sustain`].
///
/// The schedule policy supplies `alpha_t`, `beta_t` and `K`; momentum weights
/// are ignored.
pub fn run_baseline<O: BilevelOracle + ?Sized>(
    oracle: &O,
    exact: Option<&dyn ExactOracle>,
    cfg: &RunConfig,
    kind: BaselineKind,
) -> Result<RunOutput> {
    let stream = SampleStream::new(cfg.seed);
    let constants = oracle.constants().clone();
    let alpha0 = cfg.policy.params(0).alpha;
    if let BaselineKind::DoubleLoop { inner: 0 } = kind {
        return Err(Error::InvalidConfig(
            "double loop needs at least one inner step".into(),
        ));
    }
    if let BaselineKind::TwoTimescale { ratio } = kind {
        if !(ratio > 0.0) {
            return Err(Error::InvalidConfig(
                "two-timescale ratio must be positive".into(),
            ));
        }
    }
    drive(oracle, exact, cfg, |t, cur| {
        let mut params = cfg.policy.params(t);
        params.eta_f = 1.0;
        params.eta_g = 1.0;
        if let BaselineKind::TwoTimescale { ratio } = kind {
            params.alpha = alpha0 / (1.0 + t as f64).powf(0.6);
            params.beta = ratio * params.alpha.powf(2.0 / 3.0);
        }
        let ncfg = NeumannConfig::new(params.k, &constants)?;
        let inner = match kind {
            BaselineKind::DoubleLoop { inner } => inner,
            _ => 1,
        };
        let mut y = cur.y.clone();
        for j in 0..inner - 1 {
            let at = IteratePair::new(cur.x.clone(), y);
            let g = oracle.grad_y_g(&at, stream.lower(t, j as u32));
            ensure_finite(&g, "lower gradient")?;
            y = descend(&at.y, &g, params.beta);
        }
        let eval = if inner > 1 {
            Some(IteratePair::new(cur.x.clone(), y))
        } else {
            None
        };
        let at = eval.as_ref().unwrap_or(cur);
        let h_g = oracle.grad_y_g(at, stream.lower(t, inner as u32 - 1));
        ensure_finite(&h_g, "lower gradient")?;
        let hf = estimate(oracle, at, &ncfg, stream.composite(t))?;
        let next = IteratePair {
            x: descend(&at.x, &hf.value, params.alpha),
            y: descend(&at.y, &h_g, params.beta),
        };
        Ok(Step {
            h_f: hf.value,
            h_g,
            eval,
            next,
            params,
            samples: inner as u64 + composite_samples(params.k),
            hvps: hf.hvp_count as u64,
        })
    })
}

/// Dispatches to [`run_sustain`] or [`run_baseline`].
pub fn run<O: BilevelOracle + ?Sized>(
    oracle: &O,
    exact: Option<&dyn ExactOracle>,
    cfg: &RunConfig,
    algorithm: Algorithm,
) -> Result<RunOutput> {
    match algorithm {
        Algorithm::Sustain => run_sustain(oracle, exact, cfg),
        Algorithm::Baseline(kind) => run_baseline(oracle, exact, cfg, kind),
    }
}
