//! Data hyper-cleaning: learn one weight per training example so that a
//! weighted logistic regression fits the clean validation set.
//!
//! ```text
//! g(x, y) = c |y|^2 + sum_i sigmoid(x_i) BCE(a_i'y, b_i)     (training set)
//! f(x, y) = sum_j BCE(a_j'y, b_j)                            (validation set)
//! ```
//!
//! Sums are unnormalized. Minibatches of size `m` are drawn uniformly with
//! replacement and rescaled by `n / m`.

use nalgebra::DMatrix;
use rand::Rng;

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::oracle::{BilevelOracle, IteratePair, ProblemConstants};
use crate::sample::SampleToken;
use crate::Vector;

#[derive(Clone, Debug, PartialEq)]
pub struct HyperCleanSpec {
    pub train: Dataset,
    pub val: Dataset,
    /// Ridge coefficient `c` of the lower problem.
    pub c: f64,
    pub lower_batch: usize,
    pub upper_batch: usize,
}

impl HyperCleanSpec {
    /// Spec with `c = 0.001` and single-example batches.
    pub fn new(train: Dataset, val: Dataset) -> Self {
        Self {
            train,
            val,
            c: 1e-3,
            lower_batch: 1,
            upper_batch: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HyperCleanProblem {
    spec: HyperCleanSpec,
    constants: ProblemConstants,
}

pub fn make_hyperclean(spec: HyperCleanSpec) -> Result<HyperCleanProblem> {
    HyperCleanProblem::new(spec)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of logit `z` against label `b`.
fn bce(z: f64, b: f64) -> f64 {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    softplus - b * z
}

fn draw_batch(token: SampleToken, n: usize, m: usize) -> Vec<usize> {
    let mut rng = token.rng();
    (0..m).map(|_| rng.random_range(0..n)).collect()
}

impl HyperCleanProblem {
    pub fn new(spec: HyperCleanSpec) -> Result<Self> {
        if spec.train.is_empty() {
            return Err(Error::EmptyDataset("training"));
        }
        if spec.val.is_empty() {
            return Err(Error::EmptyDataset("validation"));
        }
        if spec.train.dim() != spec.val.dim() {
            return Err(Error::DimensionMismatch {
                what: "validation features",
                expected: spec.train.dim(),
                found: spec.val.dim(),
            });
        }
        if !(spec.c > 0.0) {
            return Err(Error::InvalidConstants(
                "ridge coefficient c must be positive".into(),
            ));
        }
        if spec.lower_batch == 0 || spec.upper_batch == 0 {
            return Err(Error::InvalidBatch {
                batch: 0,
                available: spec.train.len(),
            });
        }
        let n = spec.train.len() as f64;
        let n_val = spec.val.len() as f64;
        let a_tr = spec.train.max_row_norm();
        let a_val = spec.val.max_row_norm();
        // Bounds over one rescaled minibatch: sigmoid' <= 1/4, BCE'' <= 1/4,
        // |BCE'''| <= 1 / (6 sqrt 3), |s - b| <= 1.
        let third = 1.0 / (6.0 * 3f64.sqrt());
        let constants = ProblemConstants {
            mu_g: 2.0 * spec.c,
            l_g: 2.0 * spec.c + n * a_tr * a_tr / 4.0,
            c_gxy: n * a_tr / 4.0,
            c_fy: n_val * a_val,
            l_fx: 0.0,
            l_fy: n_val * a_val * a_val / 4.0,
            l_gxy: n * (a_tr / 4.0 + a_tr * a_tr / 4.0),
            l_gyy: n * (a_tr.powi(3) * third + a_tr * a_tr / 4.0),
            mu_f: None,
            sigma_f: 2.0 * n_val * a_val,
            sigma_g: 2.0 * n * a_tr,
        };
        Ok(Self { spec, constants })
    }

    pub fn spec(&self) -> &HyperCleanSpec {
        &self.spec
    }

    fn train_scale(&self) -> f64 {
        self.spec.train.len() as f64 / self.spec.lower_batch as f64
    }

    /// Full-batch lower objective.
    pub fn lower_value(&self, at: &IteratePair) -> f64 {
        let tr = &self.spec.train;
        let z = &tr.features * &at.y;
        let loss: f64 = (0..tr.len())
            .map(|i| sigmoid(at.x[i]) * bce(z[i], tr.labels[i]))
            .sum();
        self.spec.c * at.y.norm_squared() + loss
    }

    /// Full-batch validation loss.
    pub fn validation_loss(&self, y: &Vector) -> f64 {
        let val = &self.spec.val;
        let z = &val.features * y;
        (0..val.len()).map(|j| bce(z[j], val.labels[j])).sum()
    }

    /// Explicit full-batch lower Hessian, `d_lo x d_lo`; for verification.
    pub fn full_lower_hessian(&self, at: &IteratePair) -> DMatrix<f64> {
        let tr = &self.spec.train;
        let d = tr.dim();
        let mut h = DMatrix::identity(d, d) * (2.0 * self.spec.c);
        for i in 0..tr.len() {
            let a = tr.row(i);
            let s = sigmoid(a.dot(&at.y));
            h += (&a * a.transpose()) * (sigmoid(at.x[i]) * s * (1.0 - s));
        }
        h
    }

    /// Full-batch `grad_y g`.
    pub fn full_grad_y_g(&self, at: &IteratePair) -> Vector {
        let tr = &self.spec.train;
        let mut g = &at.y * (2.0 * self.spec.c);
        for i in 0..tr.len() {
            let a = tr.row(i);
            g += a.clone() * (sigmoid(at.x[i]) * (sigmoid(a.dot(&at.y)) - tr.labels[i]));
        }
        g
    }

    /// Full-batch `grad_y f`.
    pub fn full_grad_y_f(&self, y: &Vector) -> Vector {
        let val = &self.spec.val;
        let mut g = Vector::zeros(y.len());
        for j in 0..val.len() {
            let a = val.row(j);
            g += a.clone() * (sigmoid(a.dot(y)) - val.labels[j]);
        }
        g
    }
}

impl BilevelOracle for HyperCleanProblem {
    fn dim_upper(&self) -> usize {
        self.spec.train.len()
    }

    fn dim_lower(&self) -> usize {
        self.spec.train.dim()
    }

    fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    fn grad_x_f(&self, _at: &IteratePair, _xi: SampleToken) -> Vector {
        Vector::zeros(self.dim_upper())
    }

    fn grad_y_f(&self, at: &IteratePair, xi: SampleToken) -> Vector {
        let val = &self.spec.val;
        let m = self.spec.upper_batch;
        let scale = val.len() as f64 / m as f64;
        let mut g = Vector::zeros(at.y.len());
        for j in draw_batch(xi, val.len(), m) {
            let a = val.row(j);
            g += a.clone() * (scale * (sigmoid(a.dot(&at.y)) - val.labels[j]));
        }
        g
    }

    fn grad_y_g(&self, at: &IteratePair, zeta: SampleToken) -> Vector {
        let tr = &self.spec.train;
        let scale = self.train_scale();
        let mut g = &at.y * (2.0 * self.spec.c);
        for i in draw_batch(zeta, tr.len(), self.spec.lower_batch) {
            let a = tr.row(i);
            let r = sigmoid(a.dot(&at.y)) - tr.labels[i];
            g += a.clone() * (scale * sigmoid(at.x[i]) * r);
        }
        g
    }

    fn hess_xy_g_apply(&self, at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector {
        let tr = &self.spec.train;
        let scale = self.train_scale();
        let mut out = Vector::zeros(tr.len());
        for i in draw_batch(zeta, tr.len(), self.spec.lower_batch) {
            let a = tr.row(i);
            let sx = sigmoid(at.x[i]);
            let r = sigmoid(a.dot(&at.y)) - tr.labels[i];
            out[i] += scale * sx * (1.0 - sx) * r * a.dot(v);
        }
        out
    }

    fn hess_yy_g_apply(&self, at: &IteratePair, zeta: SampleToken, v: &Vector) -> Vector {
        let tr = &self.spec.train;
        let scale = self.train_scale();
        let mut out = v * (2.0 * self.spec.c);
        for i in draw_batch(zeta, tr.len(), self.spec.lower_batch) {
            let a = tr.row(i);
            let s = sigmoid(a.dot(&at.y));
            let w = scale * sigmoid(at.x[i]) * s * (1.0 - s) * a.dot(v);
            out += a * w;
        }
        out
    }

    fn upper_value(&self, at: &IteratePair) -> Option<f64> {
        Some(self.validation_loss(&at.y))
    }
}
