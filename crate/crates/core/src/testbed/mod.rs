//! Analytic test problems.
//!
//! - [`quadratic`]: stochastic quadratic bilevel family with a full exact oracle,
//! - [`hyperclean`]: data hyper-cleaning with per-example weights,
//! - [`meta_linear`]: linear least-squares meta-learning across tasks,
//! - [`data`]: synthetic corrupted classification data and a CSV loader.

pub mod data;
pub mod hyperclean;
pub mod meta_linear;
pub mod quadratic;

use rand_distr::{Distribution, StandardNormal};

use crate::sample::SampleToken;
use crate::Vector;

pub use data::{generate_corrupted_dataset, load_dataset_csv, CorruptedData, Dataset};
pub use hyperclean::{make_hyperclean, HyperCleanProblem, HyperCleanSpec};
pub use meta_linear::{make_meta_linear, MetaLinearProblem, MetaLinearSpec, MetaTask};
pub use quadratic::{make_quadratic, QuadBilevelSpec, QuadraticProblem, Sinusoid};

/// Standard normal vector drawn from the token's own stream.
pub(crate) fn gaussian(token: SampleToken, dim: usize) -> Vector {
    let mut rng = token.rng();
    Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng))
}

pub(crate) fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
