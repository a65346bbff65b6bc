//! Stochastic quadratic bilevel problems.
//!
//! ```text
//! g(x, y) = 1/2 y'Ay - y'(Bx + b)
//! f(x, y) = 1/2 |y - y_target|^2 + lambda/2 |x|^2 + s * sum_j sin(omega x_j)
//! ```
//!
//! Gaussian noise is added to `grad_y g`, `grad_y f` and optionally
//! `grad_x f`; Hessians are exact, so the estimator's expectation has a
//! closed form. The sinusoidal term is
//! optional and makes the outer function non-convex.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gaussian;
use crate::error::{Error, Result};
use crate::hypergradient::{deterministic_neumann_expectation, NeumannConfig};
use crate::oracle::{BilevelOracle, ExactOracle, IteratePair, ProblemConstants};
use crate::sample::SampleToken;
use crate::Vector;

/// Sinusoidal perturbation `amplitude * sum_j sin(frequency * x_j)` of `f`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadBilevelSpec {
    /// Lower Hessian, symmetric positive definite.
    pub a: DMatrix<f64>,
    /// Coupling, `d_lo x d_up`.
    pub b_mat: DMatrix<f64>,
    pub b: Vector,
    pub y_target: Vector,
    pub lambda: f64,
    /// Noise scale on `grad_y f`.
    pub sigma_f: f64,
    /// Noise scale on `grad_x f`; drawn from the same upper sample as the
    /// `grad_y f` noise.
    pub sigma_fx: f64,
    pub sigma_g: f64,
    pub sinusoid: Option<Sinusoid>,
    /// Radius of the ball in `y` on which `|grad_y f|` is bounded.
    pub box_radius: f64,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut *rng))
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0, |a, &b| f64::max(a, b))
}

impl QuadBilevelSpec {
    /// Random instance with lower-Hessian spectrum spread evenly over
    /// `[mu_g, l_g]`, coupling of spectral norm `coupling`, and noise-free
    /// oracles.
    pub fn random(
        d_up: usize,
        d_lo: usize,
        mu_g: f64,
        l_g: f64,
        coupling: f64,
        lambda: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = gaussian_matrix(&mut rng, d_lo, d_lo).qr().q();
        let eig = Vector::from_fn(d_lo, |i, _| {
            if d_lo == 1 {
                mu_g
            } else {
                mu_g + (l_g - mu_g) * i as f64 / (d_lo - 1) as f64
            }
        });
        let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let mut b_mat = gaussian_matrix(&mut rng, d_lo, d_up);
        let norm = spectral_norm(&b_mat);
        if norm > 0.0 {
            b_mat *= coupling / norm;
        }
        let b = gaussian_vector(&mut rng, d_lo) * 0.5;
        let y_target = gaussian_vector(&mut rng, d_lo);
        Self {
            a,
            b_mat,
            b,
            y_target,
            lambda,
            sigma_f: 0.0,
            sigma_fx: 0.0,
            sigma_g: 0.0,
            sinusoid: None,
            box_radius: 10.0,
        }
    }

    /// Scalar instance `g = a/2 y^2 - y(bx + c)`, `f = 1/2 (y - y_t)^2 + lambda/2 x^2`.
    pub fn scalar(a: f64, b: f64, c: f64, y_target: f64, lambda: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b_mat: DMatrix::from_element(1, 1, b),
            b: Vector::from_element(1, c),
            y_target: Vector::from_element(1, y_target),
            lambda,
            sigma_f: 0.0,
            sigma_fx: 0.0,
            sigma_g: 0.0,
            sinusoid: None,
            box_radius: 10.0,
        }
    }

    pub fn with_noise(mut self, sigma_f: f64, sigma_g: f64) -> Self {
        self.sigma_f = sigma_f;
        self.sigma_g = sigma_g;
        self
    }

    pub fn with_upper_x_noise(mut self, sigma_fx: f64) -> Self {
        self.sigma_fx = sigma_fx;
        self
    }

    pub fn with_sinusoid(mut self, amplitude: f64, frequency: f64) -> Self {
        self.sinusoid = Some(Sinusoid {
            amplitude,
            frequency,
        });
        self
    }

    pub fn with_box_radius(mut self, radius: f64) -> Self {
        self.box_radius = radius;
        self
    }

    pub fn dim_upper(&self) -> usize {
        self.b_mat.ncols()
    }

    pub fn dim_lower(&self) -> usize {
        self.a.nrows()
    }
}

/// Sampled and exact oracles of a [`QuadBilevelSpec`].
#[derive(Debug)]
pub struct QuadraticProblem {
    spec: QuadBilevelSpec,
    chol: Cholesky<f64, Dyn>,
    constants: ProblemConstants,
    ell_star: Option<f64>,
    box_violations: AtomicU64,
}

/// Builds the oracle pair of a quadratic instance.
pub fn make_quadratic(spec: QuadBilevelSpec) -> Result<QuadraticProblem> {
    QuadraticProblem::new(spec)
}

impl QuadraticProblem {
    pub fn new(spec: QuadBilevelSpec) -> Result<Self> {
        let d_lo = spec.dim_lower();
        let d_up = spec.dim_upper();
        let shape_ok = spec.a.ncols() == d_lo
            && spec.b_mat.nrows() == d_lo
            && spec.b.len() == d_lo
            && spec.y_target.len() == d_lo;
        if !shape_ok {
            return Err(Error::DimensionMismatch {
                what: "quadratic spec",
                expected: d_lo,
                found: spec.b_mat.nrows(),
            });
        }
        if (&spec.a - spec.a.transpose()).amax() > 1e-12 * spec.a.amax().max(1.0) {
            return Err(Error::NotSpd);
        }
        let eig = SymmetricEigen::new(spec.a.clone()).eigenvalues;
        let mu_g = eig.min();
        let l_g = eig.max();
        if !(mu_g > 0.0) {
            return Err(Error::NotSpd);
        }
        let chol = Cholesky::new(spec.a.clone()).ok_or(Error::NotSpd)?;

        let (s, w) = spec
            .sinusoid
            .map(|s| (s.amplitude.abs(), s.frequency))
            .unwrap_or((0.0, 0.0));
        let c_gxy = spectral_norm(&spec.b_mat);
        let d_lo_f = d_lo as f64;

        // Outer Hessian when there is no sinusoid: lambda I + M'M with M = A^-1 B.
        let m = chol.solve(&spec.b_mat);
        let hess_ell = m.transpose() * &m + DMatrix::identity(d_up, d_up) * spec.lambda;
        let mut mu_f = None;
        let mut ell_star = None;
        if spec.sinusoid.is_none() && d_up > 0 {
            let lmin = SymmetricEigen::new(hess_ell.clone()).eigenvalues.min();
            if lmin > 0.0 {
                mu_f = Some(lmin);
                let r = chol.solve(&spec.b) - &spec.y_target;
                let c = m.transpose() * r;
                if let Some(h) = Cholesky::new(hess_ell) {
                    let x_star = -h.solve(&c);
                    ell_star = Some(Self::ell_of(&spec, &chol, &x_star));
                }
            }
        }

        let constants = ProblemConstants {
            mu_g,
            l_g,
            c_gxy,
            c_fy: spec.box_radius + spec.y_target.norm(),
            l_fx: spec.lambda + s * w * w,
            l_fy: 1.0,
            l_gxy: 0.0,
            l_gyy: 0.0,
            mu_f,
            sigma_f: (spec.sigma_f.powi(2) * d_lo_f + spec.sigma_fx.powi(2) * d_up as f64).sqrt(),
            sigma_g: spec.sigma_g * d_lo_f.sqrt(),
        };
        Ok(Self {
            spec,
            chol,
            constants,
            ell_star,
            box_violations: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &QuadBilevelSpec {
        &self.spec
    }

    /// Number of `grad_y f` evaluations made outside the declared ball in `y`.
    pub fn box_violations(&self) -> u64 {
        self.box_violations.load(Ordering::Relaxed)
    }

    fn ell_of(spec: &QuadBilevelSpec, chol: &Cholesky<f64, Dyn>, x: &Vector) -> f64 {
        let y = chol.solve(&(&spec.b_mat * x + &spec.b));
        Self::f_value(spec, x, &y)
    }

    fn f_value(spec: &QuadBilevelSpec, x: &Vector, y: &Vector) -> f64 {
        let mut v =
            0.5 * (y - &spec.y_target).norm_squared() + 0.5 * spec.lambda * x.norm_squared();
        if let Some(s) = spec.sinusoid {
            v += s.amplitude * x.iter().map(|xj| (s.frequency * xj).sin()).sum::<f64>();
        }
        v
    }

    fn grad_x_f_exact(&self, x: &Vector) -> Vector {
        let mut g = x * self.spec.lambda;
        if let Some(s) = self.spec.sinusoid {
            let sw = s.amplitude * s.frequency;
            for (gj, xj) in g.iter_mut().zip(x.iter()) {
                *gj += sw * (s.frequency * xj).cos();
            }
        }
        g
    }

    /// Standard normal noise `(x part, y part)` of one upper sample.
    fn upper_noise(&self, xi: SampleToken) -> (Vector, Vector) {
        let d_lo = self.spec.dim_lower();
        let all = gaussian(xi, d_lo + self.spec.dim_upper());
        (
            all.rows(d_lo, all.len() - d_lo).into_owned(),
            all.rows(0, d_lo).into_owned(),
        )
    }

    /// `f(x, y)` without noise.
    pub fn f_value_at(&self, at: &IteratePair) -> f64 {
        Self::f_value(&self.spec, &at.x, &at.y)
    }
}

impl BilevelOracle for QuadraticProblem {
    fn dim_upper(&self) -> usize {
        self.spec.dim_upper()
    }

    fn dim_lower(&self) -> usize {
        self.spec.dim_lower()
    }

    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    fn grad_x_f(&self, at: &IteratePair, xi: SampleToken) -> Vector {
        let g = self.grad_x_f_exact(&at.x);
        if self.spec.sigma_fx == 0.0 {
            g
        } else {
            g + self.upper_noise(xi).0 * self.spec.sigma_fx
        }
    }

    fn grad_y_f(&self, at: &IteratePair, xi: SampleToken) -> Vector {
        if at.y.norm() > self.spec.box_radius {
            self.box_violations.fetch_add(1, Ordering::Relaxed);
        }
        let g = &at.y - &self.spec.y_target;
        if self.spec.sigma_f == 0.0 {
            g
        } else {
            g + self.upper_noise(xi).1 * self.spec.sigma_f
        }
    }

    fn grad_y_g(&self, at: &IteratePair, zeta: SampleToken) -> Vector {
        let g = self.exact_grad_y_g(at);
        if self.spec.sigma_g == 0.0 {
            g
        } else {
            g + gaussian(zeta, at.y.len()) * self.spec.sigma_g
        }
    }

    fn hess_xy_g_apply(&self, at: &IteratePair, _zeta: SampleToken, v: &Vector) -> Vector {
        self.exact_hess_xy_g_apply(at, v)
    }

    fn hess_yy_g_apply(&self, at: &IteratePair, _zeta: SampleToken, v: &Vector) -> Vector {
        self.exact_hess_yy_g_apply(at, v)
    }

    fn upper_value(&self, at: &IteratePair) -> Option<f64> {
        Some(self.f_value_at(at))
    }
}

impl ExactOracle for QuadraticProblem {
    fn exact_grad_f(&self, at: &IteratePair) -> (Vector, Vector) {
        (self.grad_x_f_exact(&at.x), &at.y - &self.spec.y_target)
    }

    fn exact_grad_y_g(&self, at: &IteratePair) -> Vector {
        &self.spec.a * &at.y - &self.spec.b_mat * &at.x - &self.spec.b
    }

    fn exact_hess_xy_g_apply(&self, _at: &IteratePair, v: &Vector) -> Vector {
        -(self.spec.b_mat.transpose() * v)
    }

    fn exact_hess_yy_g_apply(&self, _at: &IteratePair, v: &Vector) -> Vector {
        &self.spec.a * v
    }

    fn y_star(&self, x: &Vector) -> Vector {
        self.chol.solve(&(&self.spec.b_mat * x + &self.spec.b))
    }

    fn ell(&self, x: &Vector) -> f64 {
        Self::ell_of(&self.spec, &self.chol, x)
    }

    fn grad_ell(&self, x: &Vector) -> Vector {
        let y = self.y_star(x);
        self.surrogate_grad(&IteratePair::new(x.clone(), y))
    }

    fn surrogate_grad(&self, at: &IteratePair) -> Vector {
        let (gx, gy) = self.exact_grad_f(at);
        gx - self.exact_hess_xy_g_apply(at, &self.chol.solve(&gy))
    }

    fn ell_star(&self) -> Option<f64> {
        self.ell_star
    }

    fn neumann_expectation(&self, at: &IteratePair, k: usize) -> Option<Vector> {
        let cfg = NeumannConfig::new(k, &self.constants).ok()?;
        Some(deterministic_neumann_expectation(self, at, &cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_forms() {
        let p = QuadraticProblem::new(QuadBilevelSpec::scalar(1.0, 1.0, 0.0, 0.0, 0.5)).unwrap();
        let x = Vector::from_element(1, 2.0);
        assert_eq!(p.y_star(&x)[0], 2.0);
        assert_eq!(p.ell(&x), 3.0);
        assert_eq!(p.grad_ell(&x)[0], 3.0);
    }

    #[test]
    fn identity_hessian_gives_linear_solution() {
        let mut spec = QuadBilevelSpec::random(3, 4, 1.0, 1.0, 1.0, 0.0, 5);
        spec.a = DMatrix::identity(4, 4);
        spec.b = Vector::zeros(4);
        let p = QuadraticProblem::new(spec.clone()).unwrap();
        let x = Vector::from_vec(vec![0.3, -1.0, 2.0]);
        let diff = p.y_star(&x) - &spec.b_mat * &x;
        assert!(diff.amax() < 1e-14);
    }

    #[test]
    fn rejects_indefinite_lower_hessian() {
        let spec = QuadBilevelSpec::scalar(-1.0, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(QuadraticProblem::new(spec).unwrap_err(), Error::NotSpd);
    }

    #[test]
    fn spectrum_matches_requested_bounds() {
        let p =
            QuadraticProblem::new(QuadBilevelSpec::random(3, 5, 0.5, 4.0, 2.0, 0.1, 9)).unwrap();
        let c = p.constants();
        assert!((c.mu_g - 0.5).abs() < 1e-10);
        assert!((c.l_g - 4.0).abs() < 1e-10);
        assert!((c.c_gxy - 2.0).abs() < 1e-10);
    }
}
