//! Acceptance suite. Each test prints one verdict line and fails on FAIL.
//!
//! Run with `cargo test -p sustain-core --test acceptance -- --nocapture`
//! to see the verdicts.

mod common;

use std::time::Instant;

use nalgebra::DMatrix;
use sustain_core::driver::{run_baseline, run_sustain, BaselineKind, RunConfig, RunOutput};
use sustain_core::hypergradient::{
    bias_bound, choose_k_nonconvex, choose_k_strongly_convex, estimate, lipschitz_l_k,
    NeumannConfig,
};
use sustain_core::metrics::{
    fit_geometric_decay, fit_rate_exponent, running_min, samples_to_epsilon, Metric,
};
use sustain_core::oracle::{BilevelOracle, ExactOracle, IteratePair, ProblemConstants};
use sustain_core::sample::SampleStream;
use sustain_core::schedules::{
    nonconvex_constants, strongly_convex_c_beta, ScheduleParams, SchedulePolicy,
};
use sustain_core::testbed::{
    generate_corrupted_dataset, HyperCleanProblem, HyperCleanSpec, QuadBilevelSpec,
    QuadraticProblem,
};
use sustain_core::Vector;

use common::{bits, median, normal_vector, rng, verdict};

#[test]
fn criterion_01_bias_bound() {
    let start = Instant::now();
    let spec = QuadBilevelSpec::random(3, 5, 1.0, 4.0, 1.0, 0.1, 11).with_noise(1.0, 1.0);
    let p = QuadraticProblem::new(spec).unwrap();
    let c = p.constants().clone();
    let mut r = rng(1);
    let at = IteratePair::new(normal_vector(&mut r, 3, 1.0), normal_vector(&mut r, 5, 1.0));
    let surrogate = p.surrogate_grad(&at);
    let n = 100_000u64;
    let mut pass = true;
    let mut worst_bias_ratio = 0.0f64;
    let mut worst_z = 0.0f64;
    for (i, k) in [1usize, 2, 5, 10, 20].into_iter().enumerate() {
        let expectation = p.neumann_expectation(&at, k).unwrap();
        let bias = (&expectation - &surrogate).norm();
        let bound = bias_bound(&c, k).unwrap();
        pass &= bias <= bound;
        worst_bias_ratio = worst_bias_ratio.max(bias / bound);

        let cfg = NeumannConfig::new(k, &c).unwrap();
        let stream = SampleStream::new(1000 + i as u64);
        let mut s1 = Vector::zeros(3);
        let mut s2 = Vector::zeros(3);
        for t in 0..n {
            let v = estimate(&p, &at, &cfg, stream.composite(t)).unwrap().value - &expectation;
            s2 += v.component_mul(&v);
            s1 += v;
        }
        let nf = n as f64;
        let mean_dev = &s1 / nf;
        let var_sum: f64 = (0..3)
            .map(|j| (s2[j] - s1[j] * s1[j] / nf) / (nf - 1.0))
            .sum();
        let se = (var_sum / nf).sqrt();
        let z = mean_dev.norm() / se;
        worst_z = worst_z.max(z);
        pass &= z <= 3.0;
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 30.0;
    verdict(
        1,
        "bias bound",
        pass,
        &format!(
            "max bias/bound {worst_bias_ratio:.3}, max |mean - E|/SE {worst_z:.2}, {secs:.1}s"
        ),
    );
    assert!(pass);
}

fn unit_constants(mu_g: f64, l_g: f64) -> ProblemConstants {
    ProblemConstants {
        mu_g,
        l_g,
        c_gxy: 1.0,
        c_fy: 1.0,
        l_fx: 1.0,
        l_fy: 1.0,
        l_gxy: 1.0,
        l_gyy: 1.0,
        mu_f: Some(1.0),
        sigma_f: 1.0,
        sigma_g: 1.0,
    }
}

#[test]
fn criterion_02_k_selection() {
    let mut cases = vec![unit_constants(1.0, 2.0), unit_constants(0.1, 5.0)];
    let mut c = unit_constants(0.5, 3.0);
    c.c_gxy = 4.0;
    c.c_fy = 7.0;
    cases.push(c);
    let mut pass = true;
    let mut checked = 0;
    for c in &cases {
        for t in [100u64, 1_000, 10_000] {
            let k1 = choose_k_nonconvex(c, t).unwrap().k;
            let b1 = bias_bound(c, k1).unwrap();
            pass &= b1 <= 1.0 / t as f64;
            let k2 = choose_k_strongly_convex(c, t).unwrap().k;
            let b2 = bias_bound(c, k2).unwrap();
            pass &= b2 * b2 <= 1.0 / t as f64;
            checked += 2;
        }
    }
    verdict(2, "K selection", pass, &format!("{checked} inequalities"));
    assert!(pass);
}

/// Closed-form outer gradient computed from an explicit inverse.
fn closed_form_grad(spec: &QuadBilevelSpec, x: &Vector) -> Vector {
    let a_inv = spec.a.clone().try_inverse().unwrap();
    let y = &a_inv * (&spec.b_mat * x + &spec.b);
    x * spec.lambda + spec.b_mat.transpose() * (&a_inv * (y - &spec.y_target))
}

#[test]
fn criterion_03_hypergradient_correctness() {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst_fd = 0.0f64;
    let mut worst_closed = 0.0f64;
    for inst in 0..10u64 {
        let d_up = 1 + (inst as usize * 3) % 8;
        let d_lo = 1 + (inst as usize * 5 + 2) % 8;
        let spec = QuadBilevelSpec::random(d_up, d_lo, 0.5, 3.0, 1.5, 0.3, 100 + inst);
        let p = QuadraticProblem::new(spec.clone()).unwrap();
        let x = normal_vector(&mut r, d_up, 1.0);
        let hyper = p.surrogate_grad(&IteratePair::new(x.clone(), p.y_star(&x)));
        let h = 1e-5;
        let fd = Vector::from_fn(d_up, |j, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            (p.ell(&xp) - p.ell(&xm)) / (2.0 * h)
        });
        worst_fd = worst_fd.max((&hyper - &fd).norm() / fd.norm());
        let closed = closed_form_grad(&spec, &x);
        worst_closed = worst_closed.max((&p.grad_ell(&x) - &closed).norm() / closed.norm());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_fd <= 1e-5 && worst_closed <= 1e-12 && secs < 5.0;
    verdict(
        3,
        "hypergradient correctness",
        pass,
        &format!("max rel err vs FD {worst_fd:.2e}, vs closed form {worst_closed:.2e}, {secs:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_estimator_lipschitz() {
    let spec = QuadBilevelSpec::random(3, 5, 1.0, 3.0, 1.0, 0.5, 21)
        .with_noise(1.0, 1.0)
        .with_sinusoid(0.2, 1.5);
    let p = QuadraticProblem::new(spec).unwrap();
    let c = p.constants().clone();
    let k = 5;
    let l_k = lipschitz_l_k(&c, k).unwrap();
    let cfg = NeumannConfig::new(k, &c).unwrap();
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let mut violations = 0;
    for pair in 0..20u64 {
        let p1 = IteratePair::new(normal_vector(&mut r, 3, 1.0), normal_vector(&mut r, 5, 1.0));
        let dir = normal_vector(&mut r, 8, 1.0);
        let dir = &dir / dir.norm() * 1e-2;
        let dx = dir.rows(0, 3).into_owned();
        let dy = dir.rows(3, 5).into_owned();
        let p2 = IteratePair::new(&p1.x + &dx, &p1.y + &dy);
        let stream = SampleStream::new(500 + pair);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|t| {
                let s = stream.composite(t);
                let a = estimate(&p, &p1, &cfg, s).unwrap().value;
                let b = estimate(&p, &p2, &cfg, s).unwrap().value;
                (a - b).norm_squared()
            })
            .sum::<f64>()
            / n as f64;
        let bound = l_k * l_k * (dx.norm() + dy.norm()).powi(2);
        worst = worst.max(mean / bound);
        if mean > bound {
            violations += 1;
        }
    }
    let pass = violations == 0;
    verdict(
        4,
        "estimator Lipschitz",
        pass,
        &format!("{violations} violations over 20 pairs, max mean/bound {worst:.3}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_reduction_invariant() {
    let spec = QuadBilevelSpec::random(4, 6, 1.0, 3.0, 1.0, 0.2, 5).with_noise(0.5, 0.5);
    let p = QuadraticProblem::new(spec).unwrap();
    let policy = SchedulePolicy::Practical {
        base_alpha: 0.1,
        c_eta_f: 1e12,
        c_eta_g: 1e12,
        k: 4,
    };
    let cfg = RunConfig::new(1000, policy, IteratePair::zeros(4, 6), 77);
    let a = run_sustain(&p, Some(&p), &cfg).unwrap();
    let b = run_baseline(&p, Some(&p), &cfg, BaselineKind::AlternatingSgd).unwrap();
    let same_records = a.records == b.records;
    let same_final = bits(&a.final_iterate.x) == bits(&b.final_iterate.x)
        && bits(&a.final_iterate.y) == bits(&b.final_iterate.y);
    let same_returned = bits(&a.returned) == bits(&b.returned);
    let pass = same_records && same_final && same_returned && a.records.len() == 1000;
    verdict(
        5,
        "reduction invariant",
        pass,
        &format!(
            "records equal {same_records}, final iterates equal {same_final}, returned equal {same_returned}"
        ),
    );
    assert!(pass);
}

/// Mean of `e_f^2` over the last quarter of a run under the non-convex schedule.
fn last_quarter_e_f_sq(p: &QuadraticProblem, horizon: u64, seed: u64) -> f64 {
    let c = p.constants().clone();
    let policy = SchedulePolicy::nonconvex(&c, horizon, None).unwrap();
    let init = IteratePair::new(
        Vector::from_element(p.dim_upper(), 1.0),
        Vector::zeros(p.dim_lower()),
    );
    let cfg = RunConfig::new(horizon, policy, init, seed);
    let out = run_sustain(p, Some(p), &cfg).unwrap();
    assert!(out.aborted.is_none());
    let tail: Vec<f64> = out
        .records
        .iter()
        .filter(|r| r.t >= horizon * 3 / 4)
        .map(|r| r.e_f_norm.unwrap().powi(2))
        .collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[test]
fn criterion_06_variance_reduction() {
    // Deterministic, zero-bias problem: both trackers are exact.
    let mut spec = QuadBilevelSpec::random(3, 5, 1.0, 1.0, 0.5, 0.3, 6);
    spec.a = DMatrix::identity(5, 5) * 2.0;
    let p = QuadraticProblem::new(spec).unwrap();
    let policy = SchedulePolicy::Practical {
        base_alpha: 0.1,
        c_eta_f: 5.0,
        c_eta_g: 5.0,
        k: 1,
    };
    let init = IteratePair::new(Vector::from_element(3, 1.0), Vector::zeros(5));
    let out = run_sustain(&p, Some(&p), &RunConfig::new(2000, policy, init, 3)).unwrap();
    let exact_zero = out
        .records
        .iter()
        .all(|r| r.e_f_norm == Some(0.0) && r.e_g_norm == Some(0.0));

    // Stochastic problem with the non-convex schedule; noise on both partial
    // gradients of f so that sampling noise dominates the estimator variance.
    let mut spec = QuadBilevelSpec::random(3, 5, 1.0, 2.0, 0.1, 0.1, 60)
        .with_noise(1.0, 1.0)
        .with_upper_x_noise(1.0);
    spec.b = Vector::zeros(5);
    spec.y_target = Vector::zeros(5);
    let p = QuadraticProblem::new(spec).unwrap();
    let mut decreasing = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let e: Vec<f64> = [1_000u64, 4_000, 16_000]
            .into_iter()
            .map(|t| last_quarter_e_f_sq(&p, t, seed))
            .collect();
        if e[1] < e[0] && e[2] < e[1] {
            decreasing += 1;
        }
        if seed == 0 {
            detail = e;
        }
    }
    let pass = exact_zero && decreasing >= 8;
    verdict(
        6,
        "variance reduction",
        pass,
        &format!(
            "deterministic errors exactly zero {exact_zero}; decreasing in {decreasing}/10 seeds (seed 0: {:.3e}, {:.3e}, {:.3e})",
            detail[0], detail[1], detail[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_nonconvex_rate() {
    let start = Instant::now();
    let horizon = 100_000u64;
    let spec = QuadBilevelSpec::random(3, 5, 1.0, 2.0, 0.05, 0.01, 70)
        .with_noise(1.0, 1.0)
        .with_upper_x_noise(1.0)
        .with_sinusoid(0.1, 1.0);
    let p = QuadraticProblem::new(spec).unwrap();
    let policy = SchedulePolicy::nonconvex(p.constants(), horizon, None).unwrap();
    let mut exponents = Vec::new();
    for seed in 0..10u64 {
        let init = IteratePair::new(Vector::from_element(3, 2.0), Vector::zeros(5));
        let cfg = RunConfig::new(horizon, policy.clone(), init, seed).with_stride(10);
        let out = run_sustain(&p, Some(&p), &cfg).unwrap();
        let grad_sq: Vec<f64> = out.records.iter().map(|r| r.grad_ell_sq.unwrap()).collect();
        let best = running_min(&grad_sq);
        let series: Vec<(f64, f64)> = out
            .records
            .iter()
            .zip(&best)
            .map(|(r, &v)| ((r.t + 1) as f64, v))
            .collect();
        let fit = fit_rate_exponent(&series, horizon as f64 / 10.0, horizon as f64).unwrap();
        exponents.push(fit.exponent);
    }
    let med = median(&mut exponents);
    let secs = start.elapsed().as_secs_f64();
    let pass = med <= -0.5 && secs < 600.0;
    verdict(
        7,
        "non-convex rate",
        pass,
        &format!("median exponent {med:.3}, runtime {secs:.1}s"),
    );
    assert!(pass);
}

/// Seed-averaged `ell(x_t) - ell*` at every recorded step.
fn mean_gap_curve(p: &QuadraticProblem, policy: &SchedulePolicy, horizon: u64) -> Vec<(f64, f64)> {
    let seeds = 20u64;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for seed in 0..seeds {
        let init = IteratePair::new(Vector::from_element(3, 10.0), Vector::zeros(5));
        let cfg = RunConfig::new(horizon, policy.clone(), init, seed).with_stride(500);
        let out = run_sustain(p, Some(p), &cfg).unwrap();
        if curve.is_empty() {
            curve = out.records.iter().map(|r| (r.t as f64, 0.0)).collect();
        }
        for (point, r) in curve.iter_mut().zip(&out.records) {
            point.1 += r.ell_gap.unwrap() / seeds as f64;
        }
    }
    curve
}

#[test]
fn criterion_08_strongly_convex_floor() {
    let horizon = 150_000u64;
    let mut spec = QuadBilevelSpec::random(3, 5, 1.0, 2.0, 0.1, 1.0, 80)
        .with_noise(1.0, 1.0)
        .with_upper_x_noise(1.0);
    spec.b = Vector::zeros(5);
    spec.y_target = Vector::zeros(5);
    let p = QuadraticProblem::new(spec).unwrap();
    let mu_f = p.constants().mu_f.unwrap();

    let mut plateaus = Vec::new();
    let mut fits = Vec::new();
    for scale in [1.0, 0.5] {
        let policy = SchedulePolicy::strongly_convex(p.constants(), horizon, scale, None).unwrap();
        let alpha = policy.params(0).alpha;
        let curve = mean_gap_curve(&p, &policy, horizon);
        let tail: Vec<f64> = curve
            .iter()
            .filter(|(t, _)| *t >= 100_000.0)
            .map(|&(_, v)| v)
            .collect();
        let plateau = tail.iter().sum::<f64>() / tail.len() as f64;
        // Transient: the part of the curve well above the floor.
        let transient: Vec<(f64, f64)> = curve
            .iter()
            .copied()
            .filter(|&(_, v)| v > 10.0 * plateau)
            .collect();
        let fit = fit_geometric_decay(&transient).unwrap();
        plateaus.push(plateau);
        fits.push((fit, 1.0 - mu_f * alpha));
    }
    let ratio = plateaus[0] / plateaus[1];
    let fits_ok = fits
        .iter()
        .all(|(fit, contraction)| fit.r_squared >= 0.95 && fit.factor <= *contraction);
    let pass = (1.4..=2.8).contains(&ratio) && fits_ok;
    verdict(
        8,
        "strongly convex floor",
        pass,
        &format!(
            "plateau ratio {ratio:.3}; decay r2 {:.4}/{:.4}, factor {:.6}/{:.6} vs 1 - mu_f alpha {:.6}/{:.6}",
            fits[0].0.r_squared,
            fits[1].0.r_squared,
            fits[0].0.factor,
            fits[1].0.factor,
            fits[0].1,
            fits[1].1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_hyper_cleaning() {
    let start = Instant::now();
    let data = generate_corrupted_dataset(500, 500, 20, 0.3, 5);
    let mut spec = HyperCleanSpec::new(data.train, data.val);
    spec.lower_batch = 10;
    spec.upper_batch = 10;
    let p = HyperCleanProblem::new(spec).unwrap();
    let horizon = 3_000u64;
    let base = 0.3;
    // eta starts at 1 and decays like alpha_t^2.
    let c_eta = 1.0 / (base * base);
    let policy =
        SchedulePolicy::practical(p.constants(), horizon, base, c_eta, c_eta, Some(3)).unwrap();
    let init = IteratePair::new(Vector::zeros(500), Vector::zeros(20));
    let runs = |kind: Option<BaselineKind>| -> Vec<RunOutput> {
        (0..5u64)
            .map(|seed| {
                let cfg =
                    RunConfig::new(horizon, policy.clone(), init.clone(), seed).with_stride(10);
                match kind {
                    None => run_sustain(&p, None, &cfg).unwrap(),
                    Some(kind) => run_baseline(&p, None, &cfg, kind).unwrap(),
                }
            })
            .collect()
    };
    let groups = [
        ("SUSTAIN", runs(None)),
        (
            "DoubleLoop",
            runs(Some(BaselineKind::DoubleLoop { inner: 10 })),
        ),
        // Same initial lower step as the other methods.
        (
            "TwoTimescale",
            runs(Some(BaselineKind::TwoTimescale { ratio: base.cbrt() })),
        ),
    ];
    let best = groups
        .iter()
        .flat_map(|(_, outs)| outs.iter().flat_map(|o| o.records.iter()))
        .filter_map(|r| r.upper_loss)
        .fold(f64::INFINITY, f64::min);
    let threshold = 1.1 * best;
    let medians: Vec<f64> = groups
        .iter()
        .map(|(_, outs)| {
            let mut counts: Vec<f64> = outs
                .iter()
                .map(|o| {
                    samples_to_epsilon(&o.records, threshold, Metric::UpperLoss)
                        .unwrap()
                        .map_or(f64::INFINITY, |n| n as f64)
                })
                .collect();
            median(&mut counts)
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = medians[1..].iter().all(|&m| medians[0] <= m) && secs < 300.0;
    let detail = groups
        .iter()
        .zip(&medians)
        .map(|((name, _), m)| format!("{name} {m}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        9,
        "hyper-cleaning",
        pass,
        &format!(
            "best loss {best:.1}; median samples to {threshold:.1}: {detail}; runtime {secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_schedule_constants() {
    // L_y = L = 1, mu_g = 1, L_g = 2: C_gxy = 1, and L = L_fx + L_fy = 1.
    let c = ProblemConstants {
        mu_g: 1.0,
        l_g: 2.0,
        c_gxy: 1.0,
        c_fy: 0.0,
        l_fx: 0.0,
        l_fy: 1.0,
        l_gxy: 0.0,
        l_gyy: 0.0,
        mu_f: None,
        sigma_f: 0.0,
        sigma_g: 0.0,
    };
    let d = c.derived();
    assert_eq!((d.l, d.l_y), (1.0, 1.0));
    let s = nonconvex_constants(&c, 0.0).unwrap();
    let c_beta_expected = 9.0 * 2f64.sqrt();
    let c_beta_ok = (s.c_beta - c_beta_expected).abs() <= 4.0 * f64::EPSILON * c_beta_expected;

    // L_y = L = 1, mu_f = 1, mu_g = 2: C_gxy = 2 and L = L_fy C_gxy / mu_g = 1.
    let c2 = ProblemConstants {
        mu_g: 2.0,
        l_g: 2.0,
        c_gxy: 2.0,
        c_fy: 0.0,
        l_fx: 0.0,
        l_fy: 1.0,
        l_gxy: 0.0,
        l_gyy: 0.0,
        mu_f: Some(1.0),
        sigma_f: 0.0,
        sigma_g: 0.0,
    };
    let d2 = c2.derived();
    assert_eq!((d2.l, d2.l_y), (1.0, 1.0));
    let c_hat = strongly_convex_c_beta(&c2).unwrap();
    let c_hat_ok = c_hat == 9.0;

    let params = ScheduleParams {
        alpha: 0.0,
        beta: 0.0,
        eta_f: 0.0,
        eta_g: 0.0,
        k: 1,
        eta_clamped: false,
    };
    let _ = params;
    let pass = c_beta_ok && c_hat_ok;
    verdict(
        10,
        "schedule constants",
        pass,
        &format!(
            "c_beta = {:.6} (9 sqrt 2 = {c_beta_expected:.6}), c_hat_beta = {c_hat}",
            s.c_beta
        ),
    );
    assert!(pass);
}
