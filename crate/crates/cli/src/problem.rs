use sustain_core::oracle::{BilevelOracle, ExactOracle};
use sustain_core::testbed::{
    generate_corrupted_dataset, load_dataset_csv, HyperCleanProblem, HyperCleanSpec,
    MetaLinearProblem, MetaLinearSpec, QuadBilevelSpec, QuadraticProblem,
};
use sustain_core::Vector;

use crate::config::{HyperCleanData, ProblemSpec};
use crate::error::Result;

/// A built test problem, shared read-only by every grid cell.
pub enum Problem {
    Quadratic(QuadraticProblem),
    HyperClean(HyperCleanProblem),
    MetaLinear(MetaLinearProblem),
}

impl Problem {
    pub fn build(spec: &ProblemSpec) -> Result<Self> {
        Ok(match spec {
            ProblemSpec::Quadratic {
                d_upper,
                d_lower,
                mu_g,
                l_g,
                coupling,
                lambda,
                seed,
                sigma_f,
                sigma_g,
                sigma_fx,
                sinusoid,
                zero_offsets,
                box_radius,
            } => {
                let mut q = QuadBilevelSpec::random(
                    *d_upper, *d_lower, *mu_g, *l_g, *coupling, *lambda, *seed,
                )
                .with_noise(*sigma_f, *sigma_g)
                .with_upper_x_noise(*sigma_fx)
                .with_box_radius(*box_radius);
                if let Some((amplitude, frequency)) = sinusoid {
                    q = q.with_sinusoid(*amplitude, *frequency);
                }
                if *zero_offsets {
                    q.b = Vector::zeros(*d_lower);
                    q.y_target = Vector::zeros(*d_lower);
                }
                Problem::Quadratic(QuadraticProblem::new(q)?)
            }
            ProblemSpec::HyperClean {
                data,
                c,
                lower_batch,
                upper_batch,
            } => {
                let (train, val) = match data {
                    HyperCleanData::Synthetic {
                        n_train,
                        n_val,
                        dim,
                        corruption,
                        seed,
                    } => {
                        let d =
                            generate_corrupted_dataset(*n_train, *n_val, *dim, *corruption, *seed);
                        (d.train, d.val)
                    }
                    HyperCleanData::Files { train, val } => {
                        (load_dataset_csv(train)?, load_dataset_csv(val)?)
                    }
                };
                let mut s = HyperCleanSpec::new(train, val);
                s.c = *c;
                s.lower_batch = *lower_batch;
                s.upper_batch = *upper_batch;
                Problem::HyperClean(HyperCleanProblem::new(s)?)
            }
            ProblemSpec::MetaLinear {
                tasks,
                dim,
                n_train,
                n_test,
                rho,
                batch,
                noise,
                seed,
            } => Problem::MetaLinear(MetaLinearProblem::new(MetaLinearSpec::random(
                *tasks, *dim, *n_train, *n_test, *rho, *batch, *noise, *seed,
            ))?),
        })
    }

    pub fn oracle(&self) -> &dyn BilevelOracle {
        match self {
            Problem::Quadratic(p) => p,
            Problem::HyperClean(p) => p,
            Problem::MetaLinear(p) => p,
        }
    }

    pub fn exact(&self) -> Option<&dyn ExactOracle> {
        match self {
            Problem::Quadratic(p) => Some(p),
            Problem::HyperClean(_) => None,
            Problem::MetaLinear(p) => Some(p),
        }
    }
}
