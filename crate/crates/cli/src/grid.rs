//! Seeded run grids: one trajectory per (algorithm, seed) plus summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use sustain_core::driver::{run, Algorithm, RunConfig, RunOutput};
use sustain_core::metrics::{samples_to_epsilon, Metric};
use sustain_core::oracle::IteratePair;
use sustain_core::schedules::{ScheduleParams, SchedulePolicy};
use sustain_core::Vector;

use crate::config::{algorithm_label, ExperimentConfig, ScheduleSpec};
use crate::error::{CliError, Result};
use crate::output::{self, float, opt_float, NOT_REACHED, SCHEMA_VERSION, TRAJECTORY_COLUMNS};
use crate::problem::Problem;

/// Metrics reported in the summary, when present.
const SUMMARY_METRICS: [Metric; 3] = [Metric::GradEllSq, Metric::EllGap, Metric::UpperLoss];
const CURVE_METRICS: [Metric; 4] = [
    Metric::GradEllSq,
    Metric::EllGap,
    Metric::TrackingSq,
    Metric::UpperLoss,
];

#[derive(Debug)]
pub struct CellOutcome {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub result: std::result::Result<RunOutput, sustain_core::Error>,
}

impl CellOutcome {
    /// Finished without error or early abort.
    pub fn completed(&self) -> Option<&RunOutput> {
        self.result.as_ref().ok().filter(|o| o.aborted.is_none())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Quantity {
    Final,
    SamplesTo(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub algorithm: &'static str,
    pub quantity: Quantity,
    pub metric: Metric,
    pub seeds: usize,
    /// Seeds that reached the threshold; equals `seeds` for final values.
    pub reached: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Unreached seeds count as infinite, so `None` when half or more miss.
    pub median: Option<f64>,
}

#[derive(Debug)]
pub struct GridReport {
    pub output_dir: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub summary: Vec<SummaryRow>,
}

pub fn build_policy(
    spec: &ScheduleSpec,
    problem: &Problem,
    horizon: u64,
) -> Result<SchedulePolicy> {
    let c = problem.oracle().constants();
    Ok(match *spec {
        ScheduleSpec::Nonconvex { k } => SchedulePolicy::nonconvex(c, horizon, k)?,
        ScheduleSpec::StronglyConvex { alpha_scale, k } => {
            SchedulePolicy::strongly_convex(c, horizon, alpha_scale, k)?
        }
        ScheduleSpec::Practical {
            base_alpha,
            c_eta_f,
            c_eta_g,
            k,
        } => SchedulePolicy::practical(c, horizon, base_alpha, c_eta_f, c_eta_g, k)?,
        ScheduleSpec::Constant {
            alpha,
            beta,
            eta_f,
            eta_g,
            k,
        } => SchedulePolicy::Constant {
            params: ScheduleParams {
                alpha,
                beta,
                eta_f,
                eta_g,
                k: k.max(1),
                eta_clamped: false,
            },
        },
    })
}

pub fn trajectory_file(algorithm: Algorithm, seed: u64) -> String {
    format!("traj_{}_seed{seed}.csv", algorithm_label(algorithm))
}

/// Runs every (algorithm, seed) cell in parallel and writes the outputs.
///
/// Run errors are recorded per cell; only I/O and setup errors abort.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridReport> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let problem = Problem::build(&cfg.problem)?;
    let policy = build_policy(&cfg.schedule, &problem, cfg.horizon)?;
    let oracle = problem.oracle();
    let initial = IteratePair::new(
        Vector::from_element(oracle.dim_upper(), cfg.init_x),
        Vector::from_element(oracle.dim_lower(), cfg.init_y),
    );
    let jobs: Vec<(Algorithm, u64)> = cfg
        .algorithms
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    info!("running {} cells into {}", jobs.len(), dir.display());

    let cells = jobs
        .par_iter()
        .map(|&(algorithm, seed)| {
            let run_cfg = RunConfig::new(cfg.horizon, policy.clone(), initial.clone(), seed)
                .with_stride(cfg.stride)
                .with_variant(cfg.variant)
                .with_direction(cfg.direction);
            let result = run(oracle, problem.exact(), &run_cfg, algorithm);
            let records = match &result {
                Ok(out) => {
                    if let Some(e) = &out.aborted {
                        warn!("{} seed {seed} aborted: {e}", algorithm_label(algorithm));
                    }
                    out.records.as_slice()
                }
                Err(e) => {
                    warn!("{} seed {seed} failed: {e}", algorithm_label(algorithm));
                    &[]
                }
            };
            output::write_trajectory(&dir.join(trajectory_file(algorithm, seed)), records)?;
            Ok(CellOutcome {
                algorithm,
                seed,
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = summarize(cfg, &cells)?;
    write_runs(&dir.join("runs.csv"), &cells)?;
    write_thresholds(&dir.join("thresholds.csv"), cfg, &cells)?;
    write_summary(&dir.join("summary.csv"), &summary)?;
    write_curves(&dir.join("curves.csv"), cfg, &cells)?;
    write_meta(&dir.join("grid.meta"), cfg)?;
    Ok(GridReport {
        output_dir: dir,
        cells,
        summary,
    })
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}

/// Median with `None` standing for +infinity.
fn median(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    m.is_finite().then_some(m)
}

fn cells_for(cells: &[CellOutcome], a: Algorithm) -> impl Iterator<Item = &CellOutcome> {
    cells.iter().filter(move |c| c.algorithm == a)
}

pub fn summarize(cfg: &ExperimentConfig, cells: &[CellOutcome]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for &a in &cfg.algorithms {
        let label = algorithm_label(a);
        let done: Vec<&RunOutput> = cells_for(cells, a)
            .filter_map(CellOutcome::completed)
            .collect();
        let runs: Vec<&RunOutput> = cells_for(cells, a)
            .filter_map(|c| c.result.as_ref().ok())
            .collect();
        for metric in SUMMARY_METRICS {
            let finals: Vec<f64> = done
                .iter()
                .filter_map(|o| o.records.last().and_then(|r| metric.of(r)))
                .collect();
            if finals.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&finals);
            rows.push(SummaryRow {
                algorithm: label,
                quantity: Quantity::Final,
                metric,
                seeds: finals.len(),
                reached: finals.len(),
                mean,
                std,
                median: median(&finals.iter().map(|&v| Some(v)).collect::<Vec<_>>()),
            });
            for &eps in &cfg.epsilon_targets {
                let hits = runs
                    .iter()
                    .map(|o| {
                        samples_to_epsilon(&o.records, eps, metric).map(|h| h.map(|s| s as f64))
                    })
                    .collect::<sustain_core::Result<Vec<_>>>()?;
                let reached: Vec<f64> = hits.iter().flatten().copied().collect();
                let (mean, std) = mean_std(&reached);
                rows.push(SummaryRow {
                    algorithm: label,
                    quantity: Quantity::SamplesTo(eps),
                    metric,
                    seeds: hits.len(),
                    reached: reached.len(),
                    mean,
                    std,
                    median: median(&hits),
                });
            }
        }
    }
    Ok(rows)
}

fn sentinel(v: Option<f64>) -> String {
    v.map(float).unwrap_or_else(|| NOT_REACHED.to_string())
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = output::writer(path)?;
    w.write_record([
        "algorithm",
        "quantity",
        "metric",
        "eps",
        "seeds",
        "reached",
        "mean",
        "std",
        "median",
    ])?;
    for r in rows {
        let (quantity, eps, mean, std, median) = match r.quantity {
            Quantity::Final => (
                "final",
                String::new(),
                opt_float(r.mean),
                opt_float(r.std),
                opt_float(r.median),
            ),
            Quantity::SamplesTo(eps) => (
                "samples_to_eps",
                float(eps),
                sentinel(r.mean),
                sentinel(r.std),
                sentinel(r.median),
            ),
        };
        w.write_record([
            r.algorithm.to_string(),
            quantity.to_string(),
            r.metric.name().to_string(),
            eps,
            r.seeds.to_string(),
            r.reached.to_string(),
            mean,
            std,
            median,
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn write_runs(path: &Path, cells: &[CellOutcome]) -> Result<()> {
    let mut w = output::writer(path)?;
    w.write_record([
        "algorithm",
        "seed",
        "status",
        "message",
        "iterations",
        "total_samples",
        "total_hvps",
        "output_index",
    ])?;
    for c in cells {
        let label = algorithm_label(c.algorithm).to_string();
        let row = match &c.result {
            Ok(o) => {
                let (status, message) = match &o.aborted {
                    None => ("ok", String::new()),
                    Some(e) => ("aborted", e.to_string()),
                };
                [
                    label,
                    c.seed.to_string(),
                    status.to_string(),
                    message,
                    o.iterations.to_string(),
                    o.total_samples.to_string(),
                    o.total_hvps.to_string(),
                    o.output_index.to_string(),
                ]
            }
            Err(e) => [
                label,
                c.seed.to_string(),
                "error".to_string(),
                e.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ],
        };
        w.write_record(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn write_thresholds(path: &Path, cfg: &ExperimentConfig, cells: &[CellOutcome]) -> Result<()> {
    let mut w = output::writer(path)?;
    w.write_record(["algorithm", "seed", "metric", "eps", "samples"])?;
    for c in cells {
        let Ok(o) = &c.result else { continue };
        for metric in SUMMARY_METRICS {
            if o.records.first().and_then(|r| metric.of(r)).is_none() {
                continue;
            }
            for &eps in &cfg.epsilon_targets {
                let hit = samples_to_epsilon(&o.records, eps, metric)?;
                w.write_record([
                    algorithm_label(c.algorithm).to_string(),
                    c.seed.to_string(),
                    metric.name().to_string(),
                    float(eps),
                    hit.map(|s| s.to_string())
                        .unwrap_or_else(|| NOT_REACHED.to_string()),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Seed-averaged metric curves against samples drawn, for plotting.
fn write_curves(path: &Path, cfg: &ExperimentConfig, cells: &[CellOutcome]) -> Result<()> {
    let mut w = output::writer(path)?;
    let mut header = vec![
        "algorithm".to_string(),
        "t".to_string(),
        "cumulative_samples".to_string(),
        "cumulative_hvps".to_string(),
    ];
    for m in CURVE_METRICS {
        header.push(format!("{}_mean", m.name()));
        header.push(format!("{}_std", m.name()));
    }
    w.write_record(&header)?;
    for &a in &cfg.algorithms {
        let done: Vec<&RunOutput> = cells_for(cells, a)
            .filter_map(CellOutcome::completed)
            .collect();
        let Some(first) = done.first() else { continue };
        for (i, rec) in first.records.iter().enumerate() {
            let mut row = vec![
                algorithm_label(a).to_string(),
                rec.t.to_string(),
                rec.cumulative_samples.to_string(),
                rec.cumulative_hvps.to_string(),
            ];
            for m in CURVE_METRICS {
                let vals: Option<Vec<f64>> = done
                    .iter()
                    .map(|o| o.records.get(i).and_then(|r| m.of(r)))
                    .collect();
                let (mean, std) = vals.map(|v| mean_std(&v)).unwrap_or((None, None));
                row.push(opt_float(mean));
                row.push(opt_float(std));
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn write_meta(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "schema_version = {SCHEMA_VERSION}");
    let _ = writeln!(s, "trajectory_columns = {}", TRAJECTORY_COLUMNS.join(","));
    let labels: Vec<&str> = cfg.algorithms.iter().map(|&a| algorithm_label(a)).collect();
    let _ = writeln!(s, "algorithms = {}", labels.join(","));
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds = {}", seeds.join(","));
    let _ = writeln!(s, "horizon = {}", cfg.horizon);
    let _ = writeln!(s, "stride = {}", cfg.stride);
    std::fs::write(path, s).map_err(|e| CliError::io(path, e))
}
