//! Self-check suites run by `sustain check`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sustain_core::driver::{run_baseline, run_sustain, BaselineKind, RunConfig};
use sustain_core::hypergradient::{deterministic_neumann_expectation, estimate, NeumannConfig};
use sustain_core::oracle::{BilevelOracle, ExactOracle, IteratePair};
use sustain_core::sample::SampleStream;
use sustain_core::schedules::{ScheduleParams, SchedulePolicy};
use sustain_core::testbed::{
    generate_corrupted_dataset, HyperCleanProblem, HyperCleanSpec, MetaLinearProblem,
    MetaLinearSpec, QuadBilevelSpec, QuadraticProblem,
};
use sustain_core::Vector;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    /// Estimator bias against the geometric bound, and Monte Carlo mean.
    Bias,
    /// Lipschitz constants of `y*`, `grad l` and the surrogate.
    Lipschitz,
    /// Analytic gradients against central differences.
    Gradcheck,
    /// Unit momentum weights reproduce alternating SGD bit for bit.
    Reduction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {:?}/{}: {}",
            self.suite, self.name, self.detail
        )
    }
}

fn check(suite: Suite, name: impl Into<String>, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        suite,
        name: name.into(),
        passed,
        detail,
    }
}

fn normal(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vector {
    Vector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn quadratics() -> Result<Vec<(String, QuadraticProblem)>> {
    Ok(vec![
        (
            "quadratic-wide".into(),
            QuadraticProblem::new(QuadBilevelSpec::random(3, 5, 0.5, 3.0, 1.0, 0.2, 1))?,
        ),
        (
            "quadratic-tall".into(),
            QuadraticProblem::new(QuadBilevelSpec::random(4, 2, 1.0, 1.5, 2.0, 0.0, 2))?,
        ),
        (
            "quadratic-sinusoid".into(),
            QuadraticProblem::new(
                QuadBilevelSpec::random(3, 3, 1.0, 2.0, 0.5, 0.05, 3).with_sinusoid(0.3, 2.0),
            )?,
        ),
    ])
}

fn meta_linear() -> Result<MetaLinearProblem> {
    Ok(MetaLinearProblem::new(MetaLinearSpec::random(
        4, 3, 6, 6, 0.5, 2, 0.1, 8,
    ))?)
}

fn exact_problems() -> Result<Vec<(String, Box<dyn ExactAndSampled>)>> {
    let mut out: Vec<(String, Box<dyn ExactAndSampled>)> = Vec::new();
    for (name, p) in quadratics()? {
        out.push((name, Box::new(p)));
    }
    out.push(("meta-linear".into(), Box::new(meta_linear()?)));
    Ok(out)
}

trait ExactAndSampled: ExactOracle + BilevelOracle {}
impl<T: ExactOracle + BilevelOracle> ExactAndSampled for T {}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Bias => bias(),
        Suite::Lipschitz => lipschitz(),
        Suite::Gradcheck => gradcheck(),
        Suite::Reduction => reduction(),
    }
}

fn bias() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, p) in exact_problems()? {
        let c = p.constants().clone();
        let mut worst = 0.0f64;
        for k in 1..=12 {
            let cfg = NeumannConfig::new(k, &c)?;
            for _ in 0..5 {
                let at = IteratePair::new(
                    normal(&mut rng, p.dim_upper(), 1.0),
                    normal(&mut rng, p.dim_lower(), 1.0),
                );
                let mean = deterministic_neumann_expectation(p.as_ref(), &at, &cfg);
                let bias = (mean - p.surrogate_grad(&at)).norm();
                // Local form of the bound, with |grad_y f| in place of its supremum.
                let gy = p.exact_grad_f(&at).1.norm();
                let bound = c.c_gxy / c.mu_g * c.contraction().powi(k as i32) * gy;
                worst = worst.max(bias / bound.max(f64::MIN_POSITIVE));
            }
        }
        out.push(check(
            Suite::Bias,
            format!("{name} bound"),
            worst <= 1.0 + 1e-9,
            format!("max bias / bound = {worst:.4}"),
        ));

        // Sample mean of the estimator against its closed-form expectation.
        let cfg = NeumannConfig::new(4, &c)?;
        let at = IteratePair::new(
            normal(&mut rng, p.dim_upper(), 1.0),
            normal(&mut rng, p.dim_lower(), 1.0),
        );
        let n = 20_000u64;
        let stream = SampleStream::new(5);
        let mut sum = Vector::zeros(p.dim_upper());
        let mut sum_sq = 0.0;
        for t in 0..n {
            let v = estimate(p.as_ref(), &at, &cfg, stream.composite(t))?.value;
            sum_sq += v.norm_squared();
            sum += v;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean.norm_squared()).max(0.0);
        let se = (var / n as f64).sqrt();
        let err = (&mean - deterministic_neumann_expectation(p.as_ref(), &at, &cfg)).norm();
        out.push(check(
            Suite::Bias,
            format!("{name} sample mean"),
            err <= 5.0 * se + 1e-12,
            format!("|mean - expectation| = {err:.3e}, 5 se = {:.3e}", 5.0 * se),
        ));
    }
    Ok(out)
}

fn lipschitz() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (name, p) in exact_problems()? {
        let d = p.constants().derived();
        let (mut ry, mut rg, mut rs) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..200 {
            let x1 = normal(&mut rng, p.dim_upper(), 1.0);
            let x2 = normal(&mut rng, p.dim_upper(), 1.0);
            let y = normal(&mut rng, p.dim_lower(), 1.0);
            let dx = (&x1 - &x2).norm();
            ry = ry.max((p.y_star(&x1) - p.y_star(&x2)).norm() / (d.l_y * dx));
            rg = rg.max((p.grad_ell(&x1) - p.grad_ell(&x2)).norm() / (d.l_f * dx));
            let dy = (p.y_star(&x1) - &y).norm();
            let at = IteratePair::new(x1.clone(), y);
            rs = rs.max((p.surrogate_grad(&at) - p.grad_ell(&x1)).norm() / (d.l * dy));
        }
        for (what, r) in [("y*", ry), ("grad l", rg), ("surrogate", rs)] {
            out.push(check(
                Suite::Lipschitz,
                format!("{name} {what}"),
                r <= 1.0 + 1e-9,
                format!("max ratio to bound = {r:.4}"),
            ));
        }
    }
    Ok(out)
}

fn central_difference(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Vector {
    Vector::from_fn(x.len(), |i, _| {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[i] += h;
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

fn gradcheck() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (name, p) in exact_problems()? {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let x = normal(&mut rng, p.dim_upper(), 1.0);
            let g = p.grad_ell(&x);
            let fd = central_difference(|z| p.ell(z), &x, 1e-5);
            worst = worst.max((fd - &g).norm() / g.norm().max(1.0));
        }
        out.push(check(
            Suite::Gradcheck,
            format!("{name} grad l"),
            worst <= 1e-6,
            format!("max relative error = {worst:.3e}"),
        ));
    }

    let data = generate_corrupted_dataset(60, 30, 4, 0.3, 9);
    let hc = HyperCleanProblem::new(HyperCleanSpec::new(data.train, data.val))?;
    let at = IteratePair::new(normal(&mut rng, 60, 1.0), normal(&mut rng, 4, 1.0));
    let fd = central_difference(
        |y| hc.lower_value(&IteratePair::new(at.x.clone(), y.clone())),
        &at.y,
        1e-5,
    );
    let err_g = (fd - hc.full_grad_y_g(&at)).norm();
    let fd = central_difference(|y| hc.validation_loss(y), &at.y, 1e-5);
    let err_f = (fd - hc.full_grad_y_f(&at.y)).norm();
    out.push(check(
        Suite::Gradcheck,
        "hyperclean full gradients",
        err_g < 1e-5 && err_f < 1e-5,
        format!("lower error {err_g:.3e}, upper error {err_f:.3e}"),
    ));
    Ok(out)
}

fn reduction() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let spec = QuadBilevelSpec::random(3, 4, 1.0, 2.0, 0.5, 0.1, 31).with_noise(0.5, 0.5);
    let p = QuadraticProblem::new(spec)?;
    let policy = SchedulePolicy::Constant {
        params: ScheduleParams {
            alpha: 0.05,
            beta: 0.1,
            eta_f: 1.0,
            eta_g: 1.0,
            k: 3,
            eta_clamped: false,
        },
    };
    for seed in 0..5 {
        let cfg = RunConfig::new(300, policy.clone(), IteratePair::zeros(3, 4), seed);
        let a = run_sustain(&p, Some(&p), &cfg)?;
        let b = run_baseline(&p, Some(&p), &cfg, BaselineKind::AlternatingSgd)?;
        let same = a.records == b.records
            && a.final_iterate == b.final_iterate
            && a.returned == b.returned;
        out.push(check(
            Suite::Reduction,
            format!("seed {seed}"),
            same,
            format!("{} records compared", a.records.len()),
        ));
    }
    Ok(out)
}
