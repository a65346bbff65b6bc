mod common;

use proptest::prelude::*;
use sustain_core::hypergradient::{
    bias_bound, choose_k_nonconvex, choose_k_strongly_convex, estimate, lipschitz_l_k,
    NeumannConfig,
};
use sustain_core::oracle::{BilevelOracle, IteratePair, ProblemConstants};
use sustain_core::sample::{CompositeSample, SampleToken};
use sustain_core::testbed::{QuadBilevelSpec, QuadraticProblem};
use sustain_core::{Error, Vector};

/// `g = y^2 / 2`, `f = x y`: the cross Hessian vanishes.
struct Decoupled {
    constants: ProblemConstants,
}

impl Decoupled {
    fn new() -> Self {
        Self {
            constants: ProblemConstants {
                mu_g: 1.0,
                l_g: 1.0,
                c_gxy: 0.0,
                c_fy: 1.0,
                l_fx: 1.0,
                l_fy: 1.0,
                l_gxy: 0.0,
                l_gyy: 0.0,
                mu_f: None,
                sigma_f: 0.0,
                sigma_g: 0.0,
            },
        }
    }
}

impl BilevelOracle for Decoupled {
    fn dim_upper(&self) -> usize {
        1
    }
    fn dim_lower(&self) -> usize {
        1
    }
    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }
    fn grad_x_f(&self, at: &IteratePair, _xi: SampleToken) -> Vector {
        at.y.clone()
    }
    fn grad_y_f(&self, at: &IteratePair, _xi: SampleToken) -> Vector {
        at.x.clone()
    }
    fn grad_y_g(&self, at: &IteratePair, _zeta: SampleToken) -> Vector {
        at.y.clone()
    }
    fn hess_xy_g_apply(&self, _at: &IteratePair, _zeta: SampleToken, _v: &Vector) -> Vector {
        Vector::zeros(1)
    }
    fn hess_yy_g_apply(&self, _at: &IteratePair, _zeta: SampleToken, v: &Vector) -> Vector {
        v.clone()
    }
}

fn scalar_pair(x: f64, y: f64) -> IteratePair {
    IteratePair::new(Vector::from_element(1, x), Vector::from_element(1, y))
}

#[test]
fn zero_cross_hessian_leaves_direct_gradient() {
    let oracle = Decoupled::new();
    let at = scalar_pair(2.0, 3.0);
    for k in [1, 2, 7] {
        let cfg = NeumannConfig::new(k, oracle.constants()).unwrap();
        for t in 0..20 {
            let s = estimate(&oracle, &at, &cfg, CompositeSample::new(1, t)).unwrap();
            assert_eq!(s.value[0], 3.0);
        }
    }
}

#[test]
fn scalar_estimator_takes_two_values_with_mean_half_y() {
    // g = y^2 - x y, f = y^2 / 2: L_g = mu_g = 2, cross Hessian -1.
    let p = QuadraticProblem::new(QuadBilevelSpec::scalar(2.0, 1.0, 0.0, 0.0, 0.0)).unwrap();
    let cfg = NeumannConfig::new(4, p.constants()).unwrap();
    let at = scalar_pair(0.0, 4.0);
    let n = 40_000;
    let mut sum = 0.0;
    let mut zero_draws = 0;
    for t in 0..n {
        let s = estimate(&p, &at, &cfg, CompositeSample::new(9, t)).unwrap();
        if s.k_drawn == 0 {
            assert_eq!(s.value[0], 8.0);
            zero_draws += 1;
        } else {
            assert_eq!(s.value[0], 0.0);
        }
        sum += s.value[0];
    }
    let mean = sum / n as f64;
    // Standard error of a scaled Bernoulli(1/4): 8 sqrt(3/16) / sqrt(n).
    let se = 8.0 * (3.0f64 / 16.0).sqrt() / (n as f64).sqrt();
    assert!((mean - 2.0).abs() < 4.0 * se, "mean {mean}");
    let frac = zero_draws as f64 / n as f64;
    assert!((frac - 0.25).abs() < 0.01);
}

#[test]
fn hvp_count_matches_draw_and_averages_half_budget() {
    let p = QuadraticProblem::new(QuadBilevelSpec::random(3, 4, 1.0, 3.0, 0.5, 0.1, 2)).unwrap();
    let k = 9;
    let cfg = NeumannConfig::new(k, p.constants()).unwrap();
    let at = IteratePair::zeros(3, 4);
    let n = 20_000;
    let mut total = 0usize;
    for t in 0..n {
        let s = estimate(&p, &at, &cfg, CompositeSample::new(4, t)).unwrap();
        assert!(s.k_drawn < k);
        assert_eq!(s.hvp_count, s.k_drawn + 1);
        total += s.hvp_count;
    }
    let mean = total as f64 / n as f64;
    assert!((mean - (k as f64 + 1.0) / 2.0).abs() < 0.1, "mean {mean}");
}

#[test]
fn budget_one_uses_identity_product() {
    let spec = QuadBilevelSpec::random(2, 3, 0.5, 2.0, 1.0, 0.0, 5);
    let p = QuadraticProblem::new(spec.clone()).unwrap();
    let cfg = NeumannConfig::new(1, p.constants()).unwrap();
    let at = IteratePair::new(
        Vector::from_vec(vec![0.3, -0.2]),
        Vector::from_vec(vec![1.0, 0.5, -1.0]),
    );
    let s = estimate(&p, &at, &cfg, CompositeSample::new(0, 0)).unwrap();
    assert_eq!(s.k_drawn, 0);
    // grad_x f + (1 / L_g) B' grad_y f, since the cross Hessian is -B'.
    let grad_y_f = &at.y - &spec.y_target;
    let expected = &at.x * spec.lambda + spec.b_mat.transpose() * grad_y_f / p.constants().l_g;
    assert!((s.value - expected).norm() < 1e-12);
}

#[test]
fn nonfinite_iterate_is_an_error() {
    let p = QuadraticProblem::new(QuadBilevelSpec::random(2, 2, 1.0, 2.0, 1.0, 0.1, 1)).unwrap();
    let cfg = NeumannConfig::new(3, p.constants()).unwrap();
    let at = IteratePair::new(Vector::from_vec(vec![f64::NAN, 0.0]), Vector::zeros(2));
    let err = estimate(&p, &at, &cfg, CompositeSample::new(0, 0)).unwrap_err();
    assert!(matches!(err, Error::NonfiniteValue(_)));
}

#[test]
fn same_composite_sample_is_reproducible() {
    let spec = QuadBilevelSpec::random(2, 3, 1.0, 2.0, 1.0, 0.1, 3).with_noise(0.5, 0.5);
    let p = QuadraticProblem::new(spec).unwrap();
    let cfg = NeumannConfig::new(6, p.constants()).unwrap();
    let at = IteratePair::zeros(2, 3);
    let a = estimate(&p, &at, &cfg, CompositeSample::new(11, 5)).unwrap();
    let b = estimate(&p, &at, &cfg, CompositeSample::new(11, 5)).unwrap();
    assert_eq!(a, b);
    let c = estimate(&p, &at, &cfg, CompositeSample::new(11, 6)).unwrap();
    assert_ne!(a.value, c.value);
}

#[test]
fn budget_grows_by_log_ratio_of_horizons() {
    let c = ProblemConstants {
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
    };
    let small = choose_k_nonconvex(&c, 1_000).unwrap().k as f64;
    let large = choose_k_nonconvex(&c, 1_000_000).unwrap().k as f64;
    let expected = 2.0 * 1000f64.ln();
    assert!((large - small - expected).abs() <= 1.0);

    let k1 = choose_k_strongly_convex(&c, 10_000).unwrap().k as f64;
    let k2 = choose_k_strongly_convex(&c, 20_000).unwrap().k as f64;
    assert!((k2 - k1 - 2f64.ln()).abs() <= 1.0);
}

#[test]
fn bias_bound_degenerate_cases() {
    let mut c = ProblemConstants {
        mu_g: 1.5,
        l_g: 1.5,
        c_gxy: 1.0,
        c_fy: 1.0,
        l_fx: 0.0,
        l_fy: 0.0,
        l_gxy: 0.0,
        l_gyy: 0.0,
        mu_f: None,
        sigma_f: 0.0,
        sigma_g: 0.0,
    };
    assert_eq!(bias_bound(&c, 1).unwrap(), 0.0);
    c.l_g = 3.0;
    c.c_gxy = 0.0;
    assert_eq!(bias_bound(&c, 4).unwrap(), 0.0);
    c.mu_g = 4.0;
    assert!(matches!(bias_bound(&c, 4), Err(Error::InvalidConstants(_))));
}

fn constants_strategy() -> impl Strategy<Value = ProblemConstants> {
    (
        0.1f64..5.0,
        1.0f64..20.0,
        0.0f64..3.0,
        0.0f64..3.0,
        0.0f64..3.0,
        0.0f64..3.0,
        0.0f64..3.0,
        0.0f64..3.0,
    )
        .prop_map(
            |(mu_g, ratio, c_gxy, c_fy, l_fx, l_fy, l_gxy, l_gyy)| ProblemConstants {
                mu_g,
                l_g: mu_g * ratio * 1.0001,
                c_gxy,
                c_fy,
                l_fx,
                l_fy,
                l_gxy,
                l_gyy,
                mu_f: None,
                sigma_f: 0.0,
                sigma_g: 0.0,
            },
        )
}

proptest! {
    #[test]
    fn bias_bound_is_nonincreasing_in_budget(c in constants_strategy(), k in 1usize..60) {
        let a = bias_bound(&c, k).unwrap();
        let b = bias_bound(&c, k + 1).unwrap();
        prop_assert!(b <= a);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn lipschitz_constant_is_nondecreasing_in_budget(c in constants_strategy(), k in 1usize..60) {
        let a = lipschitz_l_k(&c, k).unwrap();
        let b = lipschitz_l_k(&c, k + 1).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn chosen_budget_meets_bias_target(c in constants_strategy(), t in 1u64..1_000_000) {
        let choice = choose_k_nonconvex(&c, t).unwrap();
        prop_assert!(choice.k >= 1);
        if !choice.degenerate {
            prop_assert!(bias_bound(&c, choice.k).unwrap() <= 1.0 / t as f64 * (1.0 + 1e-9));
        }
    }
}
