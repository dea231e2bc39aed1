//! Correlation, least-squares lines with slope intervals, forecast error
//! metrics and the straight-line permit baseline.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("need at least {need} points, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("{0} has zero variance")]
    Degenerate(&'static str),
    #[error("confidence must be in (0, 1), got {0}")]
    Confidence(f64),
}

fn check_pair(x: &[f64], y: &[f64], need: usize) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Length(x.len(), y.len()));
    }
    if x.len() < need {
        return Err(StatsError::TooShort { need, got: x.len() });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Means and centered sums `(mx, my, sxx, syy, sxy)`.
fn moments(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    (mx, my, sxx, syy, sxy)
}

/// Sample correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_pair(x, y, 2)?;
    let (_, _, sxx, syy, sxy) = moments(x, y);
    if sxx == 0.0 {
        return Err(StatsError::Degenerate("x"));
    }
    if syy == 0.0 {
        return Err(StatsError::Degenerate("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub slope_ci: (f64, f64),
    pub r: f64,
    pub n: usize,
}

/// Ordinary least squares with a t-based confidence interval on the slope.
pub fn linreg_ci(x: &[f64], y: &[f64], confidence: f64) -> Result<LinearFit, StatsError> {
    check_pair(x, y, 3)?;
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(StatsError::Confidence(confidence));
    }
    let (mx, my, sxx, syy, sxy) = moments(x, y);
    if sxx == 0.0 {
        return Err(StatsError::Degenerate("x"));
    }
    let n = x.len();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let slope_se = (sse / (n - 2) as f64 / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 2) as f64)
        .expect("n >= 3 gives positive degrees of freedom")
        .inverse_cdf(0.5 + confidence / 2.0);
    let half = t * slope_se;
    let r = if syy == 0.0 { 0.0 } else { (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0) };
    Ok(LinearFit { slope, intercept, slope_se, slope_ci: (slope - half, slope + half), r, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

pub fn error_metrics(actual: &[f64], predicted: &[f64]) -> Result<ErrorMetrics, StatsError> {
    check_pair(actual, predicted, 1)?;
    let n = actual.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (a, p) in actual.iter().zip(predicted) {
        let e = a - p;
        abs += e.abs();
        sq += e * e;
    }
    let mse = sq / n;
    Ok(ErrorMetrics { mae: abs / n, mse, rmse: mse.sqrt() })
}

/// Straight-line extrapolation of yearly permits, floored at zero.
pub fn linear_baseline(history: &[(i32, f64)], horizon: usize) -> Result<Vec<(i32, f64)>, StatsError> {
    if history.len() < 2 {
        return Err(StatsError::TooShort { need: 2, got: history.len() });
    }
    let x: Vec<f64> = history.iter().map(|h| h.0 as f64).collect();
    let y: Vec<f64> = history.iter().map(|h| h.1).collect();
    let (mx, my, sxx, _, sxy) = moments(&x, &y);
    if sxx == 0.0 {
        return Err(StatsError::Degenerate("year"));
    }
    let slope = sxy / sxx;
    let last = history.iter().map(|h| h.0).max().expect("non-empty");
    Ok((1..=horizon as i32)
        .map(|h| {
            let year = last + h;
            (year, (my + slope * (year as f64 - mx)).max(0.0))
        })
        .collect())
}
