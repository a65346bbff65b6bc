//! The stochastic bilevel problem interface.
//!
//! A problem is `min_x f(x, y*(x))` with `y*(x) = argmin_y g(x, y)`, accessed
//! only through sampled first-order quantities of `f` and `g` and sampled
//! Hessian-vector actions of `g`. Hessians are never materialized here.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sample::{SampleStream, SampleToken};
use crate::Vector;

/// Regularity constants of a problem instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConstants {
    /// Strong-convexity modulus of `g(x, .)`.
    pub mu_g: f64,
    /// Lipschitz constant of `grad_y g`; upper bound on the lower Hessian.
    pub l_g: f64,
    /// Bound on the norm of the cross Hessian of `g`.
    pub c_gxy: f64,
    /// Bound on the norm of `grad_y f`.
    pub c_fy: f64,
    pub l_fx: f64,
    pub l_fy: f64,
    pub l_gxy: f64,
    pub l_gyy: f64,
    /// Strong convexity of the outer function, when it is known to hold.
    pub mu_f: Option<f64>,
    pub sigma_f: f64,
    pub sigma_g: f64,
}

/// Lipschitz constants implied by [`ProblemConstants`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivedConstants {
    /// Surrogate-gradient error per unit of tracking error.
    pub l: f64,
    /// Smoothness of the outer function.
    pub l_f: f64,
    /// Lipschitz constant of `y*`.
    pub l_y: f64,
    /// `mu_g L_g / (mu_g + L_g)`.
    pub l_mu_g: f64,
}

impl ProblemConstants {
    pub fn derived(&self) -> DerivedConstants {
        let mu = self.mu_g;
        let l = self.l_fx
            + self.l_fy * self.c_gxy / mu
            + self.c_fy * (self.l_gxy / mu + self.l_gyy * self.c_gxy / (mu * mu));
        DerivedConstants {
            l,
            l_f: l + l * self.c_gxy / mu,
            l_y: self.c_gxy / mu,
            l_mu_g: mu * self.l_g / (mu + self.l_g),
        }
    }

    /// Contraction factor `1 - mu_g / L_g` of one Neumann factor.
    pub fn contraction(&self) -> f64 {
        1.0 - self.mu_g / self.l_g
    }

    pub(crate) fn ensure_valid(&self) -> Result<()> {
        let report = validate_constants(self);
        if report.is_valid() {
            Ok(())
        } else {
            let msgs: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidConstants(msgs.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConstantViolation {
    NonFinite(&'static str),
    Negative(&'static str),
    NonPositiveMuG,
    MuGExceedsLg { mu_g: f64, l_g: f64 },
    NonPositiveMuF,
}

impl fmt::Display for ConstantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonFinite(name) => write!(f, "{name} is not finite"),
            Self::Negative(name) => write!(f, "{name} is negative"),
            Self::NonPositiveMuG => write!(f, "mu_g must be strictly positive"),
            Self::MuGExceedsLg { mu_g, l_g } => write!(f, "mu_g = {mu_g} exceeds L_g = {l_g}"),
            Self::NonPositiveMuF => write!(f, "mu_f must be strictly positive when present"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<ConstantViolation>,
    pub derived: DerivedConstants,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the regularity constants and attaches the derived Lipschitz constants.
///
/// Never fails; an empty violation list means the constants are usable.
pub fn validate_constants(c: &ProblemConstants) -> ValidationReport {
    let mut violations = Vec::new();
    let named = [
        ("mu_g", c.mu_g),
        ("L_g", c.l_g),
        ("C_gxy", c.c_gxy),
        ("C_fy", c.c_fy),
        ("L_fx", c.l_fx),
        ("L_fy", c.l_fy),
        ("L_gxy", c.l_gxy),
        ("L_gyy", c.l_gyy),
        ("sigma_f", c.sigma_f),
        ("sigma_g", c.sigma_g),
    ];
    for (name, value) in named {
        if !value.is_finite() {
            violations.push(ConstantViolation::NonFinite(name));
        } else if value < 0.0 {
            violations.push(ConstantViolation::Negative(name));
        }
    }
    if c.mu_g.is_finite()
        && c.mu_g <= 0.0
        && !violations.contains(&ConstantViolation::Negative("mu_g"))
    {
        violations.push(ConstantViolation::NonPositiveMuG);
    }
    if c.mu_g > c.l_g {
        violations.push(ConstantViolation::MuGExceedsLg {
            mu_g: c.mu_g,
            l_g: c.l_g,
        });
    }
    if let Some(mu_f) = c.mu_f {
        if !mu_f.is_finite() {
            violations.push(ConstantViolation::NonFinite("mu_f"));
        } else if mu_f <= 0.0 {
            violations.push(ConstantViolation::NonPositiveMuF);
        }
    }
    ValidationReport {
        violations,
        derived: c.derived(),
    }
}

/// Upper and lower iterates `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IteratePair {
    pub x: Vector,
    pub y: Vector,
}

impl IteratePair {
    pub fn new(x: Vector, y: Vector) -> Self {
        Self { x, y }
    }

    pub fn zeros(d_up: usize, d_lo: usize) -> Self {
        Self {
            x: Vector::zeros(d_up),
            y: Vector::zeros(d_lo),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// Sampled first- and second-order access to a bilevel problem.
///
/// Every capability is a pure function of the iterate and the sample token.
/// Passing the same token to [`grad_x_f`](Self::grad_x_f) and
/// [`grad_y_f`](Self::grad_y_f) uses the same upper-level sample.
pub trait BilevelOracle: Send + Sync {
    fn dim_upper(&self) -> usize;
    fn dim_lower(&self) -> usize;
    fn constants(&self) -> &ProblemConstants;

    fn grad_x_f(&self, at: &IteratePair, xi: SampleToken) -> Vector;
    fn grad_y_f(&self, at: &IteratePair, xi: SampleToken) -> Vector;

    /// Both partial gradients of `f` under one sample.
    fn grad_f(&self, at: &IteratePair, xi: SampleToken) -> (Vector, Vector) {
        (self.grad_x_f(at, xi), self.grad_y_f(at, xi))
    }

    fn grad_y_g(&self, at: &IteratePair, zeta: SampleToken) -> Vector;

    /// Action of the sampled cross Hessian, mapping `R^{d_lo}` to `R^{d_up}`.
    fn hess_xy_g_apply(&self, at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector;

    /// Action of the sampled lower Hessian on `R^{d_lo}`.
    fn hess_yy_g_apply(&self, at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector;

    /// Full-batch upper objective `f(x, y)`, when cheaply available.
    fn upper_value(&self, _at: &IteratePair) -> Option<f64> {
        None
    }

    fn check_dims(&self, at: &IteratePair) -> Result<()> {
        if at.x.len() != self.dim_upper() {
            return Err(Error::DimensionMismatch {
                what: "x",
                expected: self.dim_upper(),
                found: at.x.len(),
            });
        }
        if at.y.len() != self.dim_lower() {
            return Err(Error::DimensionMismatch {
                what: "y",
                expected: self.dim_lower(),
                found: at.y.len(),
            });
        }
        Ok(())
    }
}

/// Deterministic counterparts available on analytic test problems.
pub trait ExactOracle: Send + Sync {
    /// `(grad_x f(x, y), grad_y f(x, y))`.
    fn exact_grad_f(&self, at: &IteratePair) -> (Vector, Vector);
    fn exact_grad_y_g(&self, at: &IteratePair) -> Vector;
    fn exact_hess_xy_g_apply(&self, at: &IteratePair, v: &Vector) -> Vector;
    fn exact_hess_yy_g_apply(&self, at: &IteratePair, v: &Vector) -> Vector;

    fn y_star(&self, x: &Vector) -> Vector;
    /// Outer function `l(x) = f(x, y*(x))`.
    fn ell(&self, x: &Vector) -> f64;
    fn grad_ell(&self, x: &Vector) -> Vector;
    /// Surrogate gradient: the hypergradient formula evaluated at an arbitrary `y`.
    fn surrogate_grad(&self, at: &IteratePair) -> Vector;
    /// Minimal value of the outer function, when known.
    fn ell_star(&self) -> Option<f64>;

    /// Expectation of the truncated-Neumann hypergradient estimator with budget
    /// `k`, when it has a closed form.
    fn neumann_expectation(&self, _at: &IteratePair, _k: usize) -> Option<Vector> {
        None
    }
}

impl<T: BilevelOracle + ?Sized> BilevelOracle for &T {
    fn dim_upper(&self) -> usize {
        (**self).dim_upper()
    }
    fn dim_lower(&self) -> usize {
        (**self).dim_lower()
    }
    fn constants(&self) -> &ProblemConstants {
        (**self).constants()
    }
    fn grad_x_f(&self, at: &IteratePair, xi: SampleToken) -> Vector {
        (**self).grad_x_f(at, xi)
    }
    fn grad_y_f(&self, at: &IteratePair, xi: SampleToken) -> Vector {
        (**self).grad_y_f(at, xi)
    }
    fn grad_f(&self, at: &IteratePair, xi: SampleToken) -> (Vector, Vector) {
        (**self).grad_f(at, xi)
    }
    fn grad_y_g(&self, at: &IteratePair, zeta: SampleToken) -> Vector {
        (**self).grad_y_g(at, zeta)
    }
    fn hess_xy_g_apply(&self, at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector {
        (**self).hess_xy_g_apply(at, zeta, v)
    }
    fn hess_yy_g_apply(&self, at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector {
        (**self).hess_yy_g_apply(at, zeta, v)
    }
    fn upper_value(&self, at: &IteratePair) -> Option<f64> {
        (**self).upper_value(at)
    }
}

/// Oracle capabilities checked by [`check_oracle_consistency`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capability {
    GradXF,
    GradYF,
    GradYG,
    HessXYG,
    HessYYG,
}

impl Capability {
    pub const ALL: [Capability; 5] = [
        Capability::GradXF,
        Capability::GradYF,
        Capability::GradYG,
        Capability::HessXYG,
        Capability::HessYYG,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapabilityDeviation {
    pub capability: Capability,
    /// Largest componentwise `|mean - exact|` over all probe points.
    pub max_deviation: f64,
    /// Whether every component stayed inside `4 * std / sqrt(n)`.
    pub within_band: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub num_samples: usize,
    pub capabilities: Vec<CapabilityDeviation>,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.capabilities.iter().all(|c| c.within_band)
    }

    pub fn deviation(&self, cap: Capability) -> Option<&CapabilityDeviation> {
        self.capabilities.iter().find(|c| c.capability == cap)
    }
}

/// Shifted running moments; exact when every sample is identical.
struct Moments {
    first: Option<Vector>,
    s1: Vector,
    s2: Vector,
    n: usize,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            first: None,
            s1: Vector::zeros(dim),
            s2: Vector::zeros(dim),
            n: 0,
        }
    }

    fn push(&mut self, v: &Vector) {
        let first = self.first.get_or_insert_with(|| v.clone());
        let d = v - &*first;
        self.s2 += d.component_mul(&d);
        self.s1 += d;
        self.n += 1;
    }

    /// Returns (max deviation, within band).
    fn compare(&self, exact: &Vector) -> (f64, bool) {
        let n = self.n as f64;
        let first = self.first.as_ref().expect("at least one sample");
        let mut max_dev = 0.0f64;
        let mut ok = true;
        for i in 0..exact.len() {
            let mean = first[i] + self.s1[i] / n;
            let dev = (mean - exact[i]).abs();
            let var = if self.n > 1 {
                ((self.s2[i] - self.s1[i] * self.s1[i] / n) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            let band = 4.0 * var.sqrt() / n.sqrt();
            if !(dev <= band) {
                ok = false;
            }
            max_dev = max_dev.max(dev);
        }
        (max_dev, ok)
    }
}

/// Compares Monte-Carlo means of every sampled capability with its exact
/// counterpart at each probe point.
///
/// Hessian actions are probed along a fixed random direction per point.
pub fn check_oracle_consistency<O, E>(
    oracle: &O,
    exact: &E,
    probe_points: &[IteratePair],
    num_samples: usize,
    rng_seed: u64,
) -> Result<ConsistencyReport>
where
    O: BilevelOracle + ?Sized,
    E: ExactOracle + ?Sized,
{
    assert!(num_samples >= 1, "num_samples must be positive");
    let stream = SampleStream::new(rng_seed);
    let mut results: Vec<CapabilityDeviation> = Capability::ALL
        .iter()
        .map(|&capability| CapabilityDeviation {
            capability,
            max_deviation: 0.0,
            within_band: true,
        })
        .collect();

    for (pi, at) in probe_points.iter().enumerate() {
        oracle.check_dims(at)?;
        let mut dir_rng = crate::sample::SampleToken::new(
            rng_seed,
            pi as u64,
            crate::sample::SampleRole::Output,
            1,
        )
        .rng();
        let probe = Vector::from_fn(oracle.dim_lower(), |_, _| {
            StandardNormal.sample(&mut dir_rng)
        });

        let d_up = oracle.dim_upper();
        let d_lo = oracle.dim_lower();
        let mut moments = [
            Moments::new(d_up),
            Moments::new(d_lo),
            Moments::new(d_lo),
            Moments::new(d_up),
            Moments::new(d_lo),
        ];
        for s in 0..num_samples {
            let t = (pi * num_samples + s) as u64;
            let comp = stream.composite(t);
            let (gx, gy) = oracle.grad_f(at, comp.upper());
            moments[0].push(&gx);
            moments[1].push(&gy);
            moments[2].push(&oracle.grad_y_g(at, stream.lower(t, 0)));
            moments[3].push(&oracle.hess_xy_g_apply(at, comp.cross(), &probe));
            moments[4].push(&oracle.hess_yy_g_apply(at, comp.hessian(1), &probe));
        }
        let (ex_gx, ex_gy) = exact.exact_grad_f(at);
        let exacts = [
            ex_gx,
            ex_gy,
            exact.exact_grad_y_g(at),
            exact.exact_hess_xy_g_apply(at, &probe),
            exact.exact_hess_yy_g_apply(at, &probe),
        ];
        for ((m, ex), res) in moments.iter().zip(exacts.iter()).zip(results.iter_mut()) {
            let (dev, ok) = m.compare(ex);
            res.max_deviation = res.max_deviation.max(dev);
            res.within_band &= ok;
        }
    }
    Ok(ConsistencyReport {
        num_samples,
        capabilities: results,
    })
}

/// Relative asymmetry `|<u, H v> - <v, H u>| / max(|<u, H v>|, tiny)` of a
/// sampled lower Hessian.
pub fn hessian_asymmetry<O: BilevelOracle + ?Sized>(
    oracle: &O,
    at: &IteratePair,
    zeta: SampleToken,
    u: &Vector,
    v: &Vector,
) -> f64 {
    let uhv = u.dot(&oracle.hess_yy_g_apply(at, zeta, v));
    let vhu = v.dot(&oracle.hess_yy_g_apply(at, zeta, u));
    (uhv - vhu).abs() / uhv.abs().max(f64::MIN_POSITIVE)
}

/// Decorator that audits every draw and Hessian-vector product.
///
/// Distinct lower-level tokens seen by `grad_y_g` and distinct upper-level
/// tokens seen by the `f` gradients are counted separately.
pub struct CountingOracle<O> {
    inner: O,
    lower_tokens: Mutex<HashSet<SampleToken>>,
    upper_tokens: Mutex<HashSet<SampleToken>>,
    hvps: AtomicU64,
    grad_calls: AtomicU64,
}

impl<O: BilevelOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            lower_tokens: Mutex::new(HashSet::new()),
            upper_tokens: Mutex::new(HashSet::new()),
            hvps: AtomicU64::new(0),
            grad_calls: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn distinct_lower_samples(&self) -> u64 {
        self.lower_tokens.lock().unwrap().len() as u64
    }

    pub fn distinct_upper_samples(&self) -> u64 {
        self.upper_tokens.lock().unwrap().len() as u64
    }

    pub fn hvp_count(&self) -> u64 {
        self.hvps.load(Ordering::Relaxed)
    }

    pub fn gradient_calls(&self) -> u64 {
        self.grad_calls.load(Ordering::Relaxed)
    }
}

impl<O: BilevelOracle> BilevelOracle for CountingOracle<O> {
    fn dim_upper(&self) -> usize {
        self.inner.dim_upper()
    }
    fn dim_lower(&self) -> usize {
        self.inner.dim_lower()
    }
    fn constants(&self) -> &ProblemConstants {
        self.inner.constants()
    }
    fn grad_x_f(&self, at: &IteratePair, xi: SampleToken) -> Vector {
        self.upper_tokens.lock().unwrap().insert(xi);
        self.grad_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.grad_x_f(at, xi)
    }
    fn grad_y_f(&self, at: &IteratePair, xi: SampleToken) -> Vector {
        self.upper_tokens.lock().unwrap().insert(xi);
        self.grad_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.grad_y_f(at, xi)
    }
    fn grad_f(&self, at: &IteratePair, xi: SampleToken) -> (Vector, Vector) {
        self.upper_tokens.lock().unwrap().insert(xi);
        self.grad_calls.fetch_add(2, Ordering::Relaxed);
        self.inner.grad_f(at, xi)
    }
    fn grad_y_g(&self, at: &IteratePair, zeta: SampleToken) -> Vector {
        self.lower_tokens.lock().unwrap().insert(zeta);
        self.grad_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.grad_y_g(at, zeta)
    }
    fn hess_xy_g_apply(&self, at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector {
        self.hvps.fetch_add(1, Ordering::Relaxed);
        self.inner.hess_xy_g_apply(at, zeta, v)
    }
    fn hess_yy_g_apply(&self, at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector {
        self.hvps.fetch_add(1, Ordering::Relaxed);
        self.inner.hess_yy_g_apply(at, zeta, v)
    }
    fn upper_value(&self, at: &IteratePair) -> Option<f64> {
        self.inner.upper_value(at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_constants() -> ProblemConstants {
        ProblemConstants {
            mu_g: 1.0,
            l_g: 2.0,
            c_gxy: 1.0,
            c_fy: 1.0,
            l_fx: 1.0,
            l_fy: 1.0,
            l_gxy: 1.0,
            l_gyy: 1.0,
            mu_f: None,
            sigma_f: 0.0,
            sigma_g: 0.0,
        }
    }

    #[test]
    fn derived_constants_for_unit_problem() {
        let report = validate_constants(&unit_constants());
        assert!(report.is_valid());
        assert_eq!(report.derived.l, 4.0);
        assert_eq!(report.derived.l_f, 8.0);
        assert_eq!(report.derived.l_y, 1.0);
        assert!((report.derived.l_mu_g - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mu_g_above_l_g_is_reported() {
        let mut c = unit_constants();
        c.mu_g = 2.0;
        c.l_g = 1.0;
        let report = validate_constants(&c);
        assert!(!report.is_valid());
        assert!(matches!(
            report.violations[0],
            ConstantViolation::MuGExceedsLg { .. }
        ));
    }

    #[test]
    fn all_zero_constants_are_valid_and_degenerate() {
        let c = ProblemConstants {
            mu_g: 1.0,
            l_g: 1.0,
            c_gxy: 0.0,
            c_fy: 0.0,
            l_fx: 0.0,
            l_fy: 0.0,
            l_gxy: 0.0,
            l_gyy: 0.0,
            mu_f: None,
            sigma_f: 0.0,
            sigma_g: 0.0,
        };
        let report = validate_constants(&c);
        assert!(report.is_valid());
        assert_eq!(report.derived.l, 0.0);
        assert_eq!(report.derived.l_f, 0.0);
        assert_eq!(report.derived.l_y, 0.0);
    }

    #[test]
    fn nonfinite_and_negative_constants() {
        let mut c = unit_constants();
        c.c_fy = f64::NAN;
        c.l_fx = -1.0;
        c.mu_f = Some(0.0);
        let report = validate_constants(&c);
        assert!(report
            .violations
            .contains(&ConstantViolation::NonFinite("C_fy")));
        assert!(report
            .violations
            .contains(&ConstantViolation::Negative("L_fx")));
        assert!(report
            .violations
            .contains(&ConstantViolation::NonPositiveMuF));
        c = unit_constants();
        c.mu_g = 0.0;
        assert!(validate_constants(&c)
            .violations
            .contains(&ConstantViolation::NonPositiveMuG));
    }
}
