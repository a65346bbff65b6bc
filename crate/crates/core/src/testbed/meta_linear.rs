//! Linear least-squares meta-learning.
//!
//! Each task `i` adapts the shared parameter `x` by a task-specific offset
//! `y_i`:
//!
//! ```text
//! g(x, y) = sum_i 1/2 |Z_i (x + y_i) - v_i|^2 + rho/2 |y|^2      (training data)
//! f(x, y) = 1/M sum_i 1/2 |Z'_i (x + y_i) - v'_i|^2               (held-out data)
//! ```
//!
//! A sample is a subset of `m` distinct tasks; the lower data term is
//! rescaled by `M / m` and the upper average is taken over the subset.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::std_normal;
use crate::error::{Error, Result};
use crate::oracle::{BilevelOracle, ExactOracle, IteratePair, ProblemConstants};
use crate::sample::SampleToken;
use crate::Vector;

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTask {
    pub z_train: DMatrix<f64>,
    pub v_train: Vector,
    pub z_test: DMatrix<f64>,
    pub v_test: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaLinearSpec {
    pub tasks: Vec<MetaTask>,
    pub rho: f64,
    /// Number of tasks per sample.
    pub batch: usize,
    /// Radius bounding `|x + y_i|` over the region of interest.
    pub operating_radius: f64,
}

impl MetaLinearSpec {
    /// Tasks whose targets come from `x_true + delta_i` with Gaussian
    /// design matrices scaled by `1/sqrt(n)`.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        num_tasks: usize,
        dim: usize,
        n_train: usize,
        n_test: usize,
        rho: f64,
        batch: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_true = Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let design = |n: usize, rng: &mut ChaCha8Rng| {
            let scale = Normal::new(0.0, 1.0 / (n.max(1) as f64).sqrt()).expect("valid normal");
            DMatrix::from_fn(n, dim, |_, _| scale.sample(rng))
        };
        let tasks = (0..num_tasks)
            .map(|_| {
                let delta = Vector::from_fn(dim, |_, _| 0.5 * std_normal(&mut rng));
                let w = &x_true + delta;
                let z_train = design(n_train, &mut rng);
                let z_test = design(n_test, &mut rng);
                let e_tr = Vector::from_fn(n_train, |_, _| noise * std_normal(&mut rng));
                let e_te = Vector::from_fn(n_test, |_, _| noise * std_normal(&mut rng));
                MetaTask {
                    v_train: &z_train * &w + e_tr,
                    v_test: &z_test * &w + e_te,
                    z_train,
                    z_test,
                }
            })
            .collect();
        Self {
            tasks,
            rho,
            batch,
            operating_radius: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaLinearProblem {
    spec: MetaLinearSpec,
    dim: usize,
    gram: Vec<DMatrix<f64>>,
    regularized: Vec<Cholesky<f64, Dyn>>,
    constants: ProblemConstants,
    ell_star: Option<f64>,
}

pub fn make_meta_linear(spec: MetaLinearSpec) -> Result<MetaLinearProblem> {
    MetaLinearProblem::new(spec)
}

impl MetaLinearProblem {
    pub fn new(spec: MetaLinearSpec) -> Result<Self> {
        let num_tasks = spec.tasks.len();
        if num_tasks == 0 {
            return Err(Error::EmptyDataset("tasks"));
        }
        if spec.batch == 0 || spec.batch > num_tasks {
            return Err(Error::InvalidBatch {
                batch: spec.batch,
                available: num_tasks,
            });
        }
        if !(spec.rho > 0.0) {
            return Err(Error::InvalidConstants("rho must be positive".into()));
        }
        let dim = spec.tasks[0].z_train.ncols();
        for t in &spec.tasks {
            let ok = t.z_train.ncols() == dim
                && t.z_test.ncols() == dim
                && t.v_train.len() == t.z_train.nrows()
                && t.v_test.len() == t.z_test.nrows();
            if !ok {
                return Err(Error::DimensionMismatch {
                    what: "task data",
                    expected: dim,
                    found: t.z_train.ncols(),
                });
            }
        }
        let gram: Vec<DMatrix<f64>> = spec
            .tasks
            .iter()
            .map(|t| t.z_train.transpose() * &t.z_train)
            .collect();
        let regularized: Vec<_> = gram
            .iter()
            .map(|g| Cholesky::new(g + DMatrix::identity(dim, dim) * spec.rho).ok_or(Error::NotSpd))
            .collect::<Result<_>>()?;

        let lam_max = gram
            .iter()
            .map(|g| SymmetricEigen::new(g.clone()).eigenvalues.max())
            .fold(0.0, f64::max);
        let m = spec.batch as f64;
        let ratio = num_tasks as f64 / m;
        let r = spec.operating_radius;
        let test_norm = spec
            .tasks
            .iter()
            .map(|t| t.z_test.norm())
            .fold(0.0, f64::max);
        let grad_f_bound = spec
            .tasks
            .iter()
            .map(|t| t.z_test.norm() * (t.z_test.norm() * r + t.v_test.norm()))
            .fold(0.0, f64::max)
            / m.sqrt();
        let grad_g_bound = spec
            .tasks
            .iter()
            .map(|t| t.z_train.norm() * (t.z_train.norm() * r + t.v_train.norm()))
            .fold(0.0, f64::max)
            * ratio
            * m.sqrt();
        let deterministic = spec.batch == num_tasks;
        let constants = ProblemConstants {
            mu_g: spec.rho,
            l_g: spec.rho + ratio * lam_max,
            c_gxy: ratio * m.sqrt() * lam_max,
            c_fy: grad_f_bound,
            l_fx: test_norm * test_norm,
            l_fy: test_norm * test_norm,
            l_gxy: 0.0,
            l_gyy: 0.0,
            mu_f: None,
            sigma_f: if deterministic {
                0.0
            } else {
                2.0 * grad_f_bound
            },
            sigma_g: if deterministic {
                0.0
            } else {
                2.0 * grad_g_bound
            },
        };
        let mut problem = Self {
            spec,
            dim,
            gram,
            regularized,
            constants,
            ell_star: None,
        };
        problem.ell_star = problem.compute_ell_star();
        Ok(problem)
    }

    pub fn num_tasks(&self) -> usize {
        self.spec.tasks.len()
    }

    fn block<'a>(&self, y: &'a Vector, i: usize) -> nalgebra::DVectorView<'a, f64> {
        y.rows(i * self.dim, self.dim)
    }

    fn draw_tasks(&self, token: SampleToken) -> Vec<usize> {
        let mut rng = token.rng();
        let mut idx =
            rand::seq::index::sample(&mut rng, self.num_tasks(), self.spec.batch).into_vec();
        idx.sort_unstable();
        idx
    }

    fn test_residual(&self, x: &Vector, y: &Vector, i: usize) -> Vector {
        let t = &self.spec.tasks[i];
        &t.z_test * (x + self.block(y, i)) - &t.v_test
    }

    fn task_grad_y_g(&self, x: &Vector, y: &Vector, i: usize, scale: f64) -> Vector {
        let t = &self.spec.tasks[i];
        let r = &t.z_train * (x + self.block(y, i)) - &t.v_train;
        t.z_train.transpose() * r * scale
    }

    /// `(G_i + rho I)^-1` applied to `v`.
    fn solve_block(&self, i: usize, v: &Vector) -> Vector {
        self.regularized[i].solve(v)
    }

    fn grad_f_over(&self, at: &IteratePair, tasks: &[usize], weight: f64) -> (Vector, Vector) {
        let mut gx = Vector::zeros(self.dim);
        let mut gy = Vector::zeros(at.y.len());
        for &i in tasks {
            let t = &self.spec.tasks[i];
            let g = t.z_test.transpose() * self.test_residual(&at.x, &at.y, i) * weight;
            gx += &g;
            gy.rows_mut(i * self.dim, self.dim).copy_from(&g);
        }
        (gx, gy)
    }

    fn compute_ell_star(&self) -> Option<f64> {
        // l(x) = 1/(2M) sum |G_i x + c_i|^2 with x + y_i*(x) affine in x.
        let d = self.dim;
        let mut h = DMatrix::zeros(d, d);
        let mut rhs = Vector::zeros(d);
        for (i, t) in self.spec.tasks.iter().enumerate() {
            let p_z = self.regularized[i].solve(&(t.z_train.transpose() * &t.z_train));
            let g = &t.z_test * (DMatrix::identity(d, d) - p_z);
            let p_v = self.solve_block(i, &(t.z_train.transpose() * &t.v_train));
            let c = &t.z_test * p_v - &t.v_test;
            h += g.transpose() * &g;
            rhs += g.transpose() * c;
        }
        let x_star = -Cholesky::new(h)?.solve(&rhs);
        Some(self.ell(&x_star))
    }
}

impl BilevelOracle for MetaLinearProblem {
    fn dim_upper(&self) -> usize {
        self.dim
    }

    fn dim_lower(&self) -> usize {
        self.dim * self.num_tasks()
    }

    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    fn grad_x_f(&self, at: &IteratePair, xi: SampleToken) -> Vector {
        self.grad_f(at, xi).0
    }

    fn grad_y_f(&self, at: &IteratePair, xi: SampleToken) -> Vector {
        self.grad_f(at, xi).1
    }

    fn grad_f(&self, at: &IteratePair, xi: SampleToken) -> (Vector, Vector) {
        let tasks = self.draw_tasks(xi);
        self.grad_f_over(at, &tasks, 1.0 / self.spec.batch as f64)
    }

    fn grad_y_g(&self, at: &IteratePair, zeta: SampleToken) -> Vector {
        let scale = self.num_tasks() as f64 / self.spec.batch as f64;
        let mut g = &at.y * self.spec.rho;
        for i in self.draw_tasks(zeta) {
            let gi = self.task_grad_y_g(&at.x, &at.y, i, scale);
            let mut block = g.rows_mut(i * self.dim, self.dim);
            block += gi;
        }
        g
    }

    fn hess_xy_g_apply(&self, _at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector {
        let scale = self.num_tasks() as f64 / self.spec.batch as f64;
        let mut out = Vector::zeros(self.dim);
        for i in self.draw_tasks(zeta) {
            out += &self.gram[i] * self.block(v, i) * scale;
        }
        out
    }

    fn hess_yy_g_apply(&self, _at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector {
        let scale = self.num_tasks() as f64 / self.spec.batch as f64;
        let mut out = v * self.spec.rho;
        for i in self.draw_tasks(zeta) {
            let hv = &self.gram[i] * self.block(v, i) * scale;
            let mut block = out.rows_mut(i * self.dim, self.dim);
            block += hv;
        }
        out
    }

    fn upper_value(&self, at: &IteratePair) -> Option<f64> {
        let m = self.num_tasks();
        Some(
            (0..m)
                .map(|i| 0.5 * self.test_residual(&at.x, &at.y, i).norm_squared())
                .sum::<f64>()
                / m as f64,
        )
    }
}

impl ExactOracle for MetaLinearProblem {
    fn exact_grad_f(&self, at: &IteratePair) -> (Vector, Vector) {
        let all: Vec<usize> = (0..self.num_tasks()).collect();
        self.grad_f_over(at, &all, 1.0 / self.num_tasks() as f64)
    }

    fn exact_grad_y_g(&self, at: &IteratePair) -> Vector {
        let mut g = &at.y * self.spec.rho;
        for i in 0..self.num_tasks() {
            let gi = self.task_grad_y_g(&at.x, &at.y, i, 1.0);
            let mut block = g.rows_mut(i * self.dim, self.dim);
            block += gi;
        }
        g
    }

    fn exact_hess_xy_g_apply(&self, _at: &IteratePair, v: &Vector) -> Vector {
        let mut out = Vector::zeros(self.dim);
        for i in 0..self.num_tasks() {
            out += &self.gram[i] * self.block(v, i);
        }
        out
    }

    fn exact_hess_yy_g_apply(&self, _at: &IteratePair, v: &Vector) -> Vector {
        let mut out = v * self.spec.rho;
        for i in 0..self.num_tasks() {
            let hv = &self.gram[i] * self.block(v, i);
            let mut block = out.rows_mut(i * self.dim, self.dim);
            block += hv;
        }
        out
    }

    fn y_star(&self, x: &Vector) -> Vector {
        let mut y = Vector::zeros(self.dim_lower());
        for (i, t) in self.spec.tasks.iter().enumerate() {
            let rhs = t.z_train.transpose() * (&t.v_train - &t.z_train * x);
            y.rows_mut(i * self.dim, self.dim)
                .copy_from(&self.solve_block(i, &rhs));
        }
        y
    }

    fn ell(&self, x: &Vector) -> f64 {
        let y = self.y_star(x);
        self.upper_value(&IteratePair::new(x.clone(), y))
            .expect("upper value is always available")
    }

    fn grad_ell(&self, x: &Vector) -> Vector {
        let y = self.y_star(x);
        self.surrogate_grad(&IteratePair::new(x.clone(), y))
    }

    fn surrogate_grad(&self, at: &IteratePair) -> Vector {
        let (mut gx, gy) = self.exact_grad_f(at);
        for i in 0..self.num_tasks() {
            let w = self.solve_block(i, &self.block(&gy, i).into_owned());
            gx -= &self.gram[i] * w;
        }
        gx
    }

    fn ell_star(&self) -> Option<f64> {
        self.ell_star
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_larger_than_tasks_is_rejected() {
        let mut spec = MetaLinearSpec::random(3, 2, 4, 4, 1.0, 3, 0.0, 1);
        spec.batch = 4;
        assert!(matches!(
            MetaLinearProblem::new(spec),
            Err(Error::InvalidBatch {
                batch: 4,
                available: 3
            })
        ));
    }
}
