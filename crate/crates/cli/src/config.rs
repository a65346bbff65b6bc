//! Flat `key = value` experiment configuration.
//!
//! Keys are dotted (`problem.kind`, `schedule.policy`, ...). Blank lines and
//! lines starting with `#` are ignored. Values given later win, so command
//! line overrides are applied by inserting them after the file contents.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sustain_core::driver::{Algorithm, BaselineKind, Direction};
use sustain_core::momentum::EstimatorVariant;

use crate::error::{CliError, Result};

/// Environment variable that overrides `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "SUSTAIN_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub enum ProblemSpec {
    Quadratic {
        d_upper: usize,
        d_lower: usize,
        mu_g: f64,
        l_g: f64,
        coupling: f64,
        lambda: f64,
        seed: u64,
        sigma_f: f64,
        sigma_g: f64,
        sigma_fx: f64,
        /// `(amplitude, frequency)` of the nonconvex upper term.
        sinusoid: Option<(f64, f64)>,
        /// Drop the random lower offset and upper target.
        zero_offsets: bool,
        box_radius: f64,
    },
    HyperClean {
        data: HyperCleanData,
        c: f64,
        lower_batch: usize,
        upper_batch: usize,
    },
    MetaLinear {
        tasks: usize,
        dim: usize,
        n_train: usize,
        n_test: usize,
        rho: f64,
        batch: usize,
        noise: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum HyperCleanData {
    Synthetic {
        n_train: usize,
        n_val: usize,
        dim: usize,
        corruption: f64,
        seed: u64,
    },
    Files {
        train: PathBuf,
        val: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleSpec {
    Nonconvex {
        k: Option<usize>,
    },
    StronglyConvex {
        alpha_scale: f64,
        k: Option<usize>,
    },
    Practical {
        base_alpha: f64,
        c_eta_f: f64,
        c_eta_g: f64,
        k: Option<usize>,
    },
    Constant {
        alpha: f64,
        beta: f64,
        eta_f: f64,
        eta_g: f64,
        k: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub algorithms: Vec<Algorithm>,
    pub schedule: ScheduleSpec,
    pub variant: EstimatorVariant,
    pub direction: Direction,
    pub horizon: u64,
    pub stride: u64,
    pub seeds: Vec<u64>,
    pub init_x: f64,
    pub init_y: f64,
    pub output_dir: PathBuf,
    pub epsilon_targets: Vec<f64>,
}

/// Short name used in file names and CSV rows.
pub fn algorithm_label(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Sustain => "sustain",
        Algorithm::Baseline(BaselineKind::AlternatingSgd) => "alternating",
        Algorithm::Baseline(BaselineKind::TwoTimescale { .. }) => "two_timescale",
        Algorithm::Baseline(BaselineKind::DoubleLoop { .. }) => "double_loop",
    }
}

/// Parses `key = value` lines into an ordered map.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Syntax {
            line: i + 1,
            message: format!("expected `key = value`, found {line:?}"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CliError::Syntax {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `--key=value` command line override.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| CliError::Invalid(format!("override {arg:?} must start with --")))?;
    let (k, v) = body
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("override {arg:?} must look like --key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Tracks which keys were read so leftovers can be reported.
struct Reader {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Reader {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| CliError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                reason: e.to_string(),
            }),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn bad(&self, key: &str, reason: impl Into<String>) -> CliError {
        CliError::BadValue {
            key: key.to_string(),
            value: self.map.get(key).cloned().unwrap_or_default(),
            reason: reason.into(),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(CliError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}

fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
        .collect()
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|e: T::Err| e.to_string()))
        .collect()
}

impl ExperimentConfig {
    /// Reads a config file, then applies the output-directory environment
    /// variable, then `overrides` in order.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut pairs = parse_pairs(&text)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            pairs.push(("output.dir".into(), dir));
        }
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut r = Reader {
            map: pairs.into_iter().collect(),
            used: BTreeSet::new(),
        };
        let problem = read_problem(&mut r)?;
        let algorithms = read_algorithms(&mut r)?;
        let schedule = read_schedule(&mut r)?;

        let variant = match r.get("run.variant", "two_eval".to_string())?.as_str() {
            "two_eval" => EstimatorVariant::TwoEval,
            "option_i" => EstimatorVariant::OptionI,
            "option_ii" => EstimatorVariant::OptionII,
            _ => return Err(r.bad("run.variant", "expected two_eval, option_i or option_ii")),
        };
        let direction = match r.get("run.direction", "plain".to_string())?.as_str() {
            "plain" => Direction::Plain,
            "adam" => Direction::Adam,
            _ => return Err(r.bad("run.direction", "expected plain or adam")),
        };
        let horizon: u64 = r.get("run.horizon", 1000)?;
        if horizon == 0 {
            return Err(r.bad("run.horizon", "must be at least 1"));
        }
        let stride: u64 = r.get("run.stride", 1)?;
        if stride == 0 {
            return Err(r.bad("run.stride", "must be at least 1"));
        }
        let seeds = match r.raw("run.seeds") {
            None => vec![0],
            Some(s) => parse_seeds(&s).map_err(|e| r.bad("run.seeds", e))?,
        };
        if seeds.is_empty() {
            return Err(r.bad("run.seeds", "need at least one seed"));
        }
        let init_x = r.get("run.init_x", 0.0)?;
        let init_y = r.get("run.init_y", 0.0)?;
        let output_dir: PathBuf = r.get("output.dir", PathBuf::from("sustain-out"))?;
        let epsilon_targets = match r.raw("output.epsilon") {
            None => Vec::new(),
            Some(s) => parse_list::<f64>(&s).map_err(|e| r.bad("output.epsilon", e))?,
        };
        if epsilon_targets.iter().any(|e| e.is_nan() || *e <= 0.0) {
            return Err(r.bad("output.epsilon", "targets must be positive"));
        }
        r.finish()?;
        Ok(Self {
            problem,
            algorithms,
            schedule,
            variant,
            direction,
            horizon,
            stride,
            seeds,
            init_x,
            init_y,
            output_dir,
            epsilon_targets,
        })
    }
}

fn read_problem(r: &mut Reader) -> Result<ProblemSpec> {
    let kind = r.get("problem.kind", "quadratic".to_string())?;
    Ok(match kind.as_str() {
        "quadratic" => {
            let amplitude: f64 = r.get("problem.sinusoid.amplitude", 0.0)?;
            let frequency: f64 = r.get("problem.sinusoid.frequency", 1.0)?;
            ProblemSpec::Quadratic {
                d_upper: r.get("problem.d_upper", 3)?,
                d_lower: r.get("problem.d_lower", 5)?,
                mu_g: r.get("problem.mu_g", 1.0)?,
                l_g: r.get("problem.l_g", 2.0)?,
                coupling: r.get("problem.coupling", 0.5)?,
                lambda: r.get("problem.lambda", 0.1)?,
                seed: r.get("problem.seed", 0)?,
                sigma_f: r.get("problem.sigma_f", 0.0)?,
                sigma_g: r.get("problem.sigma_g", 0.0)?,
                sigma_fx: r.get("problem.sigma_fx", 0.0)?,
                sinusoid: (amplitude != 0.0).then_some((amplitude, frequency)),
                zero_offsets: r.get("problem.zero_offsets", false)?,
                box_radius: r.get("problem.box_radius", 10.0)?,
            }
        }
        "hyperclean" => {
            let train: Option<PathBuf> = r.opt("problem.train_csv")?;
            let val: Option<PathBuf> = r.opt("problem.val_csv")?;
            let data = match (train, val) {
                (Some(train), Some(val)) => HyperCleanData::Files { train, val },
                (None, None) => HyperCleanData::Synthetic {
                    n_train: r.get("problem.n_train", 500)?,
                    n_val: r.get("problem.n_val", 500)?,
                    dim: r.get("problem.dim", 20)?,
                    corruption: r.get("problem.corruption", 0.3)?,
                    seed: r.get("problem.seed", 0)?,
                },
                _ => {
                    return Err(CliError::Invalid(
                        "problem.train_csv and problem.val_csv must be given together".into(),
                    ))
                }
            };
            ProblemSpec::HyperClean {
                data,
                c: r.get("problem.c", 1e-3)?,
                lower_batch: r.get("problem.lower_batch", 1)?,
                upper_batch: r.get("problem.upper_batch", 1)?,
            }
        }
        "meta_linear" => ProblemSpec::MetaLinear {
            tasks: r.get("problem.tasks", 10)?,
            dim: r.get("problem.dim", 5)?,
            n_train: r.get("problem.n_train", 20)?,
            n_test: r.get("problem.n_test", 20)?,
            rho: r.get("problem.rho", 1.0)?,
            batch: r.get("problem.batch", 2)?,
            noise: r.get("problem.noise", 0.1)?,
            seed: r.get("problem.seed", 0)?,
        },
        _ => {
            return Err(r.bad(
                "problem.kind",
                "expected quadratic, hyperclean or meta_linear",
            ))
        }
    })
}

fn read_algorithms(r: &mut Reader) -> Result<Vec<Algorithm>> {
    let names = r.get("algorithm.list", "sustain".to_string())?;
    let inner: usize = r.get("algorithm.double_loop.inner", 10)?;
    let ratio: f64 = r.get("algorithm.two_timescale.ratio", 1.0)?;
    let mut out = Vec::new();
    for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let a = match name {
            "sustain" => Algorithm::Sustain,
            "alternating" => Algorithm::Baseline(BaselineKind::AlternatingSgd),
            "two_timescale" => Algorithm::Baseline(BaselineKind::TwoTimescale { ratio }),
            "double_loop" => Algorithm::Baseline(BaselineKind::DoubleLoop { inner }),
            other => return Err(r.bad("algorithm.list", format!("unknown algorithm {other:?}"))),
        };
        if out.contains(&a) {
            return Err(r.bad("algorithm.list", format!("{name} listed twice")));
        }
        out.push(a);
    }
    if out.is_empty() {
        return Err(r.bad("algorithm.list", "need at least one algorithm"));
    }
    Ok(out)
}

fn read_schedule(r: &mut Reader) -> Result<ScheduleSpec> {
    let policy = r.get("schedule.policy", "practical".to_string())?;
    let k: Option<usize> = r.opt("schedule.k")?;
    Ok(match policy.as_str() {
        "nonconvex" => ScheduleSpec::Nonconvex { k },
        "strongly_convex" => ScheduleSpec::StronglyConvex {
            alpha_scale: r.get("schedule.alpha_scale", 1.0)?,
            k,
        },
        "practical" => ScheduleSpec::Practical {
            base_alpha: r.get("schedule.base_alpha", 0.1)?,
            c_eta_f: r.get("schedule.c_eta_f", 1.0)?,
            c_eta_g: r.get("schedule.c_eta_g", 1.0)?,
            k,
        },
        "constant" => ScheduleSpec::Constant {
            alpha: r.get("schedule.alpha", 0.01)?,
            beta: r.get("schedule.beta", 0.01)?,
            eta_f: r.get("schedule.eta_f", 1.0)?,
            eta_g: r.get("schedule.eta_g", 1.0)?,
            k: k.unwrap_or(1),
        },
        _ => {
            return Err(r.bad(
                "schedule.policy",
                "expected nonconvex, strongly_convex, practical or constant",
            ))
        }
    })
}
