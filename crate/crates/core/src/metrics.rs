//! Rate fits and sample-complexity summaries of recorded trajectories.

use crate::driver::TrajectoryRecord;
use crate::error::{Error, Result};

/// Minimum number of points accepted by the fits.
pub const MIN_FIT_POINTS: usize = 8;

/// Power-law fit `value ~ exp(intercept) * t^exponent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
}

/// Exponential fit `value ~ exp(intercept) * factor^t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    /// Per-step contraction factor `exp(slope)`.
    pub factor: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Mean shifted by the first element, exact for constant inputs.
fn shifted_mean(v: &[f64]) -> f64 {
    let first = v[0];
    first + v.iter().map(|x| x - first).sum::<f64>() / v.len() as f64
}

/// Ordinary least squares; returns `(slope, intercept, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let mx = shifted_mean(xs);
    let my = shifted_mean(ys);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if ss_res == 0.0 || syy == 0.0 {
        1.0
    } else {
        1.0 - ss_res / syy
    };
    (slope, intercept, r_squared)
}

/// Least-squares slope of `ln(value)` against `ln(t)` over points with
/// `t_min <= t <= t_max`.
pub fn fit_rate_exponent(series: &[(f64, f64)], t_min: f64, t_max: f64) -> Result<RateFit> {
    let t_min = t_min.max(1.0);
    let window: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|&(t, _)| t >= t_min && t <= t_max)
        .collect();
    if let Some(&(t, value)) = window.iter().find(|&&(_, v)| !(v > 0.0)) {
        return Err(Error::NonPositiveValue { t, value });
    }
    if window.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientPoints {
            found: window.len(),
            required: MIN_FIT_POINTS,
        });
    }
    let xs: Vec<f64> = window.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = window.iter().map(|p| p.1.ln()).collect();
    let (exponent, intercept, r_squared) = linear_fit(&xs, &ys);
    Ok(RateFit {
        exponent,
        intercept,
        r_squared,
        window: (t_min, t_max),
    })
}

/// Least-squares slope of `ln(value)` against `t`.
pub fn fit_geometric_decay(series: &[(f64, f64)]) -> Result<DecayFit> {
    if let Some(&(t, value)) = series.iter().find(|&&(_, v)| !(v > 0.0)) {
        return Err(Error::NonPositiveValue { t, value });
    }
    if series.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientPoints {
            found: series.len(),
            required: MIN_FIT_POINTS,
        });
    }
    let xs: Vec<f64> = series.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = series.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r_squared) = linear_fit(&xs, &ys);
    Ok(DecayFit {
        factor: slope.exp(),
        slope,
        intercept,
        r_squared,
    })
}

/// Prefix minima of `values`.
pub fn running_min(values: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    values
        .iter()
        .map(|&v| {
            best = best.min(v);
            best
        })
        .collect()
}

/// Recorded quantity used for thresholds and fits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    GradEllSq,
    EllGap,
    TrackingSq,
    UpperLoss,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::GradEllSq => "grad_ell_sq",
            Metric::EllGap => "ell_gap",
            Metric::TrackingSq => "tracking_sq",
            Metric::UpperLoss => "upper_loss",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grad_ell_sq" => Ok(Metric::GradEllSq),
            "ell_gap" => Ok(Metric::EllGap),
            "tracking_sq" => Ok(Metric::TrackingSq),
            "upper_loss" => Ok(Metric::UpperLoss),
            other => Err(Error::Parse(format!("unknown metric {other:?}"))),
        }
    }

    pub fn of(&self, r: &TrajectoryRecord) -> Option<f64> {
        match self {
            Metric::GradEllSq => r.grad_ell_sq,
            Metric::EllGap => r.ell_gap,
            Metric::TrackingSq => r.tracking_sq,
            Metric::UpperLoss => r.upper_loss,
        }
    }
}

/// Cumulative samples at the first record whose metric is at most `eps`;
/// `None` when the threshold is never reached.
pub fn samples_to_epsilon(
    records: &[TrajectoryRecord],
    eps: f64,
    metric: Metric,
) -> Result<Option<u64>> {
    let mut hit = None;
    for r in records {
        let value = metric.of(r).ok_or(Error::MissingMetric(metric.name()))?;
        if hit.is_none() && value <= eps {
            hit = Some(r.cumulative_samples);
        }
    }
    Ok(hit)
}
