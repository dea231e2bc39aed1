//! Smoothing of historical transition probabilities, stochastic forecasts of
//! future matrices, state propagation and Monte Carlo bands.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_indexed, stream_rng, Execution};
use crate::ingestion::AnnualObservation;
use crate::model::{
    raw_from_free, step, ModelError, OwnerCategory, RawMatrix, StateVector, Transition, TransitionMatrix,
    FREE_PARAMETERS, N_FREE, N_STATES, PERMIT_FLOW_PARAMS,
};

/// Rows whose sum falls at or below this are treated as degenerate.
pub const DEGENERATE_ROW_SUM: f64 = 1e-12;

/// Rows this close to 1 are left undivided, which makes
/// [`normalize_rows`] exactly idempotent.
const NORMALIZED_SLACK: f64 = 1e-12;

const MC_STREAM_SALT: u64 = 0x6d63_5f72_6570_6c69;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("input series is empty")]
    Empty,
    #[error("alpha must be in (0, 1], got {0}")]
    Alpha(f64),
    #[error("invalid forecast settings: {0}")]
    Settings(String),
    #[error("matrix for year {year} cannot be normalized: {reason}")]
    Structure { year: i32, reason: String },
    #[error("last matrix year {matrix} does not precede last observation year {observation}")]
    HistoryMismatch { matrix: i32, observation: i32 },
    #[error("platted lots {platted} is smaller than the state total {total}")]
    Platted { platted: f64, total: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("failed to write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to write output: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed to serialize output: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastSettings {
    pub alpha: f64,
    pub horizon: usize,
    pub noise_sd: f64,
    pub scale_factor: f64,
    pub mc_runs: usize,
    pub mc_sd_fraction: f64,
    pub seed: u64,
    /// Number of most recent historical matrices that feed the smoother.
    /// Zero uses the whole history.
    pub history_window: usize,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            horizon: 7,
            noise_sd: 0.05,
            scale_factor: 1.0,
            mc_runs: 1000,
            mc_sd_fraction: 0.20,
            seed: 0,
            history_window: 4,
        }
    }
}

impl ForecastSettings {
    pub fn validate(&self) -> Result<(), ForecastError> {
        check_alpha(self.alpha)?;
        let bad = |m: &str| Err(ForecastError::Settings(m.to_string()));
        if self.horizon < 1 {
            return bad("horizon must be at least 1 year");
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad("noise_sd must be finite and >= 0");
        }
        if !(self.scale_factor.is_finite() && self.scale_factor >= 0.0) {
            return bad("scale_factor must be finite and >= 0");
        }
        if !(self.mc_sd_fraction.is_finite() && self.mc_sd_fraction >= 0.0) {
            return bad("mc_sd_fraction must be finite and >= 0");
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), ForecastError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(ForecastError::Alpha(alpha))
    }
}

/// Exponential moving average with `s[0] = v[0]`.
pub fn ema_smooth(values: &[f64], alpha: f64) -> Result<Vec<f64>, ForecastError> {
    check_alpha(alpha)?;
    let (&first, rest) = values.split_first().ok_or(ForecastError::Empty)?;
    let mut out = Vec::with_capacity(values.len());
    out.push(first);
    let mut prev = first;
    for &v in rest {
        prev = alpha * v + (1.0 - alpha) * prev;
        out.push(prev);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilitySeries {
    pub transition: Transition,
    pub years: Vec<i32>,
    pub values: Vec<f64>,
    pub smoothed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizeWarning {
    pub year: i32,
    pub row: OwnerCategory,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SmoothedHistory {
    pub series: Vec<ProbabilitySeries>,
    /// Matrix built from the final smoothed values, dated like the last
    /// historical matrix.
    pub last: TransitionMatrix,
    pub warnings: Vec<NormalizeWarning>,
}

/// Smooths each free parameter over the last `window` matrices (all of them
/// when `window` is 0).
pub fn smooth_history(
    matrices: &[TransitionMatrix],
    alpha: f64,
    window: usize,
) -> Result<SmoothedHistory, ForecastError> {
    check_alpha(alpha)?;
    if matrices.is_empty() {
        return Err(ForecastError::Empty);
    }
    let start = if window == 0 { 0 } else { matrices.len().saturating_sub(window) };
    let used = &matrices[start..];
    let years: Vec<i32> = used.iter().map(|m| m.year()).collect();
    let params: Vec<[f64; N_FREE]> = used.iter().map(|m| m.free_params()).collect();
    let mut series = Vec::with_capacity(N_FREE);
    let mut last = [0.0; N_FREE];
    for (k, t) in FREE_PARAMETERS.iter().enumerate() {
        let values: Vec<f64> = params.iter().map(|p| p[k]).collect();
        let smoothed = ema_smooth(&values, alpha)?;
        last[k] = *smoothed.last().expect("non-empty");
        series.push(ProbabilitySeries { transition: *t, years: years.clone(), values, smoothed });
    }
    let year = *years.last().expect("non-empty");
    let (last, warnings) = normalize_rows(&raw_from_free(&last), year)?;
    Ok(SmoothedHistory { series, last, warnings })
}

/// Row normalization: divide by the row sum, clip negatives, divide again.
///
/// A row whose sum is at or below [`DEGENERATE_ROW_SUM`] at either division
/// is replaced by pure self-retention and reported as a warning.
pub fn normalize_rows(raw: &RawMatrix, year: i32) -> Result<(TransitionMatrix, Vec<NormalizeWarning>), ForecastError> {
    let structure = |reason: String| ForecastError::Structure { year, reason };
    let r = OwnerCategory::Permits.index();
    for (i, row) in raw.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(structure(format!("entry ({i},{j}) is {v}")));
            }
        }
    }
    if raw[r] != [0.0, 0.0, 0.0, 0.0, 1.0] {
        return Err(structure(format!("permits row is {:?}", raw[r])));
    }
    for from in [OwnerCategory::Flippers, OwnerCategory::Adjacents] {
        if raw[from.index()][r] != 0.0 {
            return Err(structure(format!("{from}->Permits must be zero")));
        }
    }

    let mut out = *raw;
    let mut warnings = Vec::new();
    for (i, row) in out.iter_mut().enumerate().take(N_STATES - 1) {
        let ok = divide_by_sum(row) && {
            for v in row.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            divide_by_sum(row)
        };
        if !ok {
            *row = [0.0; N_STATES];
            row[i] = 1.0;
            let cat = OwnerCategory::from_index(i).expect("row index");
            warnings.push(NormalizeWarning {
                year,
                row: cat,
                message: format!("{cat} row sums to zero; replaced by self-retention"),
            });
        }
    }
    Ok((TransitionMatrix::new(out, year)?, warnings))
}

fn divide_by_sum(row: &mut [f64; N_STATES]) -> bool {
    let sum: f64 = row.iter().sum();
    if sum <= DEGENERATE_ROW_SUM {
        return false;
    }
    if (sum - 1.0).abs() > NORMALIZED_SLACK {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    true
}

#[derive(Debug, Clone)]
pub struct ProbabilityForecast {
    pub matrices: Vec<TransitionMatrix>,
    pub warnings: Vec<NormalizeWarning>,
}

/// Draws `settings.horizon` future matrices, dated from `last_smoothed.year() + 1`.
pub fn forecast_probabilities<R: Rng + ?Sized>(
    last_smoothed: &TransitionMatrix,
    settings: &ForecastSettings,
    rng: &mut R,
) -> Result<ProbabilityForecast, ForecastError> {
    settings.validate()?;
    let mut prev = last_smoothed.free_params();
    for k in PERMIT_FLOW_PARAMS {
        prev[k] *= settings.scale_factor;
    }
    let alpha = settings.alpha;
    let mut matrices = Vec::with_capacity(settings.horizon);
    let mut warnings = Vec::new();
    for h in 0..settings.horizon {
        let mut next = [0.0; N_FREE];
        for k in 0..N_FREE {
            let z: f64 = rng.sample(StandardNormal);
            let random = prev[k] + settings.noise_sd * z;
            next[k] = alpha * random + (1.0 - alpha) * prev[k];
        }
        let year = last_smoothed.year() + 1 + h as i32;
        let (m, w) = normalize_rows(&raw_from_free(&next), year)?;
        warnings.extend(w);
        prev = m.free_params();
        matrices.push(m);
    }
    Ok(ProbabilityForecast { matrices, warnings })
}

/// Applies the matrices in order starting from `x0`.
pub fn forecast_states(x0: &StateVector, matrices: &[TransitionMatrix]) -> Result<Vec<StateVector>, ModelError> {
    let mut out = Vec::with_capacity(matrices.len());
    let mut x = *x0;
    for m in matrices {
        x = step(&x, m)?;
        out.push(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Historical,
    Forecast,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Historical => "historical",
            Phase::Forecast => "forecast",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub year: i32,
    pub phase: Phase,
    pub permits: f64,
    pub buildout: f64,
    pub permits_ci: Option<Band>,
    pub buildout_ci: Option<Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSeries {
    pub rows: Vec<ForecastRow>,
    pub mc_runs: usize,
    /// Normalization fallbacks hit while drawing replicates.
    pub mc_fallbacks: usize,
}

impl ForecastSeries {
    pub fn forecast_rows(&self) -> impl Iterator<Item = &ForecastRow> {
        self.rows.iter().filter(|r| r.phase == Phase::Forecast)
    }

    /// Prepends observed years as historical rows.
    pub fn with_history(mut self, observations: &[AnnualObservation], platted: f64) -> Self {
        let mut rows: Vec<ForecastRow> = observations
            .iter()
            .filter(|o| self.rows.first().is_none_or(|r| o.year < r.year))
            .map(|o| ForecastRow {
                year: o.year,
                phase: Phase::Historical,
                permits: o.permits_issued,
                buildout: o.category_counts.permits() / platted,
                permits_ci: None,
                buildout_ci: None,
            })
            .collect();
        rows.append(&mut self.rows);
        self.rows = rows;
        self
    }

    pub fn write_csv<W: Write>(&self, preamble: &[String], mut sink: W) -> Result<(), ForecastError> {
        for line in preamble {
            writeln!(sink, "# {line}")?;
        }
        let with_ci = self.mc_runs > 0;
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["year", "phase", "permits"];
        if with_ci {
            header.extend(["permits_lo", "permits_hi"]);
        }
        header.push("buildout");
        if with_ci {
            header.extend(["buildout_lo", "buildout_hi"]);
        }
        w.write_record(&header)?;
        let band = |b: Option<Band>| match b {
            Some(b) => [b.low.to_string(), b.high.to_string()],
            None => [String::new(), String::new()],
        };
        for r in &self.rows {
            let mut rec = vec![r.year.to_string(), r.phase.as_str().to_string(), r.permits.to_string()];
            if with_ci {
                rec.extend(band(r.permits_ci));
            }
            rec.push(r.buildout.to_string());
            if with_ci {
                rec.extend(band(r.buildout_ci));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes matrices as a JSON array of `{year, entries}` objects.
pub fn write_matrices_json<W: Write>(matrices: &[TransitionMatrix], sink: W) -> Result<(), ForecastError> {
    serde_json::to_writer_pretty(sink, matrices)?;
    Ok(())
}

/// Point forecast from `base_matrices` plus percentile bands from
/// `settings.mc_runs` perturbed replicates.
///
/// Buildout is measured against `platted`, which may exceed the state total
/// when some lots are still unsold.
pub fn monte_carlo(
    x0: &StateVector,
    base_matrices: &[TransitionMatrix],
    settings: &ForecastSettings,
    platted: f64,
    exec: Execution,
) -> Result<ForecastSeries, ForecastError> {
    if !(settings.mc_sd_fraction.is_finite() && settings.mc_sd_fraction >= 0.0) {
        return Err(ForecastError::Settings("mc_sd_fraction must be finite and >= 0".into()));
    }
    let total = x0.total();
    if !(platted > 0.0 && platted + 1e-9 * platted >= total) {
        return Err(ForecastError::Platted { platted, total });
    }
    let point = forecast_states(x0, base_matrices)?;
    let (point_permits, point_buildout) = trajectory_metrics(x0, &point, platted);

    let runs = settings.mc_runs;
    let replicates = map_indexed(runs, exec, |r| {
        let mut rng = stream_rng(settings.seed ^ MC_STREAM_SALT, r as u64);
        let mut fallbacks = 0;
        let mut matrices = Vec::with_capacity(base_matrices.len());
        for m in base_matrices {
            let mut p = m.free_params();
            for v in p.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += settings.mc_sd_fraction * *v * z;
            }
            let (pm, w) = normalize_rows(&raw_from_free(&p), m.year())?;
            fallbacks += w.len();
            matrices.push(pm);
        }
        let states = forecast_states(x0, &matrices)?;
        let (permits, buildout) = trajectory_metrics(x0, &states, platted);
        Ok::<_, ForecastError>((permits, buildout, fallbacks))
    });
    let replicates = replicates.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mc_fallbacks = replicates.iter().map(|r| r.2).sum();

    let band = |year: usize, pick: fn(&Replicate) -> &Vec<f64>, point: f64| {
        if replicates.is_empty() {
            return None;
        }
        let mut xs: Vec<f64> = replicates.iter().map(|r| pick(r)[year]).collect();
        xs.sort_by(f64::total_cmp);
        Some(Band { low: percentile(&xs, 0.025).min(point), high: percentile(&xs, 0.975).max(point) })
    };
    let rows = point
        .iter()
        .enumerate()
        .map(|(h, s)| ForecastRow {
            year: s.year,
            phase: Phase::Forecast,
            permits: point_permits[h],
            buildout: point_buildout[h],
            permits_ci: band(h, |r| &r.0, point_permits[h]),
            buildout_ci: band(h, |r| &r.1, point_buildout[h]),
        })
        .collect();
    Ok(ForecastSeries { rows, mc_runs: runs, mc_fallbacks })
}

#[derive(Debug, Clone)]
pub struct ForecastRun {
    pub smoothed: SmoothedHistory,
    pub matrices: Vec<TransitionMatrix>,
    pub warnings: Vec<NormalizeWarning>,
    pub series: ForecastSeries,
}

/// Smooths the fitted history, draws future matrices from stream 0 of
/// `settings.seed`, and runs the Monte Carlo from the last observation.
/// The returned series includes the observed years.
pub fn forecast_from_history(
    observations: &[AnnualObservation],
    matrices: &[TransitionMatrix],
    settings: &ForecastSettings,
    platted: f64,
    exec: Execution,
) -> Result<ForecastRun, ForecastError> {
    settings.validate()?;
    let last_obs = observations.last().ok_or(ForecastError::Empty)?;
    let last_matrix = matrices.last().ok_or(ForecastError::Empty)?;
    if last_matrix.year() + 1 != last_obs.year {
        return Err(ForecastError::HistoryMismatch { matrix: last_matrix.year(), observation: last_obs.year });
    }
    let smoothed = smooth_history(matrices, settings.alpha, settings.history_window)?;
    let mut rng = stream_rng(settings.seed, 0);
    let forecast = forecast_probabilities(&smoothed.last, settings, &mut rng)?;
    let mut warnings = smoothed.warnings.clone();
    warnings.extend(forecast.warnings);
    let series = monte_carlo(&last_obs.category_counts, &forecast.matrices, settings, platted, exec)?
        .with_history(observations, platted);
    Ok(ForecastRun { smoothed, matrices: forecast.matrices, warnings, series })
}

/// Permits and buildout per year, plus normalization fallbacks.
type Replicate = (Vec<f64>, Vec<f64>, usize);

fn trajectory_metrics(x0: &StateVector, states: &[StateVector], platted: f64) -> (Vec<f64>, Vec<f64>) {
    let mut prev = x0.permits();
    let mut permits = Vec::with_capacity(states.len());
    let mut buildout = Vec::with_capacity(states.len());
    for s in states {
        let now = s.permits();
        permits.push((now - prev).max(0.0));
        buildout.push((now / platted).clamp(0.0, 1.0));
        prev = now;
    }
    (permits, buildout)
}

/// Linear-interpolated quantile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile of empty data");
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
