//! Regime detection over yearly transition-probability vectors: CUSUM
//! charts, k-means, diagonal Gaussian mixtures and information criteria.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_indexed, stream_rng, Execution};
use crate::model::{Transition, TransitionMatrix, FREE_PARAMETERS, N_FREE};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const EM_TOLERANCE: f64 = 1e-8;
pub const EM_MAX_ITERATIONS: usize = 500;
const LLOYD_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegimeError {
    #[error("series is empty")]
    Empty,
    #[error("k = {k} is out of range for {n} points")]
    KOutOfRange { k: usize, n: usize },
    #[error("points have inconsistent dimensions")]
    Dimension,
    #[error("years must be consecutive ({prev} then {next})")]
    NonConsecutive { prev: i32, next: i32 },
    #[error("feature {index} of year {year} is {value}, outside [0, 1]")]
    OutOfRange { year: i32, index: usize, value: f64 },
    #[error("failed to write output: {0}")]
    Io(String),
}

/// Yearly vectors of the 14 free transition probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVectorSeries {
    pub years: Vec<i32>,
    pub vectors: Vec<Vec<f64>>,
}

impl FeatureVectorSeries {
    pub fn new(years: Vec<i32>, vectors: Vec<Vec<f64>>) -> Result<Self, RegimeError> {
        if years.is_empty() {
            return Err(RegimeError::Empty);
        }
        if years.len() != vectors.len() || vectors.iter().any(|v| v.len() != N_FREE) {
            return Err(RegimeError::Dimension);
        }
        for w in years.windows(2) {
            if w[1] != w[0] + 1 {
                return Err(RegimeError::NonConsecutive { prev: w[0], next: w[1] });
            }
        }
        for (year, v) in years.iter().zip(&vectors) {
            for (index, &value) in v.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(RegimeError::OutOfRange { year: *year, index, value });
                }
            }
        }
        Ok(Self { years, vectors })
    }

    pub fn from_matrices(matrices: &[TransitionMatrix]) -> Result<Self, RegimeError> {
        Self::new(
            matrices.iter().map(|m| m.year()).collect(),
            matrices.iter().map(|m| m.free_params().to_vec()).collect(),
        )
    }

    /// Values of one free parameter across years.
    pub fn column(&self, index: usize) -> Vec<f64> {
        self.vectors.iter().map(|v| v[index]).collect()
    }
}

/// Cumulative deviation from `target` (the series mean when absent).
pub fn cusum(series: &[f64], target: Option<f64>) -> Result<Vec<f64>, RegimeError> {
    if series.is_empty() {
        return Err(RegimeError::Empty);
    }
    let target = target.unwrap_or_else(|| series.iter().sum::<f64>() / series.len() as f64);
    let mut acc = 0.0;
    Ok(series
        .iter()
        .map(|s| {
            acc += s - target;
            acc
        })
        .collect())
}

/// Index of the first point after the largest `|c|`, i.e. where the new
/// level starts. `None` when the peak is at the last point.
pub fn cusum_changepoint(series: &[f64]) -> Result<Option<usize>, RegimeError> {
    let c = cusum(series, None)?;
    let mut best = 0;
    for (i, v) in c.iter().enumerate() {
        if v.abs() > c[best].abs() {
            best = i;
        }
    }
    Ok((best + 1 < series.len()).then_some(best + 1))
}

/// Binary segmentation with the CUSUM split. Each round splits the segment
/// whose split removes the most squared error, until `max_changes` splits
/// are made or no split reduces the error by more than `min_gain`. Segments
/// shorter than `min_size` are never produced. Returned indices are sorted.
pub fn binary_segmentation(
    series: &[f64],
    max_changes: usize,
    min_size: usize,
    min_gain: f64,
) -> Result<Vec<usize>, RegimeError> {
    if series.is_empty() {
        return Err(RegimeError::Empty);
    }
    let min_size = min_size.max(1);
    let mut cuts = vec![0, series.len()];
    for _ in 0..max_changes {
        let mut best: Option<(f64, usize)> = None;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if let Some((gain, at)) = best_split(&series[a..b], min_size) {
                if gain > min_gain && best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, a + at));
                }
            }
        }
        match best {
            Some((_, at)) => {
                let pos = cuts.partition_point(|&c| c < at);
                cuts.insert(pos, at);
            }
            None => break,
        }
    }
    Ok(cuts[1..cuts.len() - 1].to_vec())
}

fn best_split(seg: &[f64], min_size: usize) -> Option<(f64, usize)> {
    let n = seg.len();
    if n < 2 * min_size {
        return None;
    }
    let c = cusum(seg, None).ok()?;
    let mut best: Option<(f64, usize)> = None;
    for i in (min_size - 1)..(n - min_size) {
        if best.is_none_or(|(v, _)| c[i].abs() > v) {
            best = Some((c[i].abs(), i));
        }
    }
    let (_, i) = best?;
    let left = (i + 1) as f64;
    let right = (n - i - 1) as f64;
    let gain = c[i] * c[i] * n as f64 / (left * right);
    Some((gain, i + 1))
}

fn dims(points: &[Vec<f64>], k: usize) -> Result<usize, RegimeError> {
    let n = points.len();
    if n == 0 {
        return Err(RegimeError::Empty);
    }
    if k == 0 || k > n {
        return Err(RegimeError::KOutOfRange { k, n });
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(RegimeError::Dimension);
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Renumbers labels by order of first appearance.
fn canonical_labels(labels: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &l in labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    for m in map.iter_mut().filter(|m| **m == usize::MAX) {
        *m = next;
        next += 1;
    }
    (labels.iter().map(|&l| map[l]).collect(), map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// Cluster ids numbered by first appearance.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroids.
    pub distortion: f64,
    /// Distortion after each Lloyd iteration.
    pub history: Vec<f64>,
}

/// k-means++ seeding followed by Lloyd iterations until assignments stop
/// changing.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult, RegimeError> {
    let d = dims(points, k)?;
    let n = points.len();
    let mut rng = stream_rng(seed, 0);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            if nearest[idx] == 0.0 {
                idx = nearest.iter().rposition(|&w| w > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (j, c) in centroids.iter().enumerate() {
                    let dd = sq_dist(p, c);
                    if dd < bd {
                        bd = dd;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let distortion = |labels: &[usize], centroids: &[Vec<f64>]| -> f64 {
        points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
    };

    let mut labels = assign(&centroids);
    let mut history = Vec::new();
    for _ in 0..LLOYD_MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        history.push(distortion(&labels, &centroids));
        let next = assign(&centroids);
        if next == labels {
            break;
        }
        labels = next;
    }
    let distortion = distortion(&labels, &centroids);
    let (labels, map) = canonical_labels(&labels, k);
    let mut ordered = vec![Vec::new(); k];
    for (old, c) in centroids.into_iter().enumerate() {
        ordered[map[old]] = c;
    }
    Ok(KMeansResult { labels, centroids: ordered, distortion, history })
}

/// Best of `restarts` k-means runs with seeds `seed..seed + restarts`;
/// ties go to the lowest seed.
pub fn kmeans_best(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
    exec: Execution,
) -> Result<KMeansResult, RegimeError> {
    let runs = map_indexed(restarts.max(1), exec, |r| kmeans(points, k, seed.wrapping_add(r as u64)));
    let mut best: Option<KMeansResult> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.distortion < b.distortion) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmResult {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// `responsibilities[i][j]`: probability that point `i` came from component `j`.
    pub responsibilities: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    /// Log-likelihood before the first M step and after each one.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl GmmResult {
    /// Most responsible component per point, numbered by first appearance.
    pub fn labels(&self) -> Vec<usize> {
        let k = self.weights.len();
        let raw: Vec<usize> = self
            .responsibilities
            .iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        canonical_labels(&raw, k).0
    }

    /// Free parameters of a diagonal mixture in `d` dimensions.
    pub fn n_params(&self) -> usize {
        gmm_param_count(self.weights.len(), self.means.first().map_or(0, Vec::len))
    }
}

pub fn gmm_param_count(k: usize, d: usize) -> usize {
    2 * k * d + k - 1
}

/// Restarts used when [`gmm_fit`] picks its k-means starting partition.
pub const GMM_INIT_RESTARTS: usize = 10;

/// EM for a diagonal-covariance Gaussian mixture, started from the best of
/// [`GMM_INIT_RESTARTS`] k-means runs.
pub fn gmm_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<GmmResult, RegimeError> {
    let init = kmeans_best(points, k, seed, GMM_INIT_RESTARTS, Execution::Sequential)?;
    gmm_from_kmeans(points, &init)
}

fn gmm_from_kmeans(points: &[Vec<f64>], init: &KMeansResult) -> Result<GmmResult, RegimeError> {
    let k = init.centroids.len();
    let d = dims(points, k)?;
    let n = points.len();

    let mut weights: Vec<f64> = vec![0.0; k];
    let mut means = init.centroids.clone();
    let mut variances = vec![vec![0.0; d]; k];
    for (p, &l) in points.iter().zip(&init.labels) {
        weights[l] += 1.0;
        for ((v, x), m) in variances[l].iter_mut().zip(p).zip(&means[l]) {
            *v += (x - m) * (x - m);
        }
    }
    for j in 0..k {
        for v in variances[j].iter_mut() {
            *v = (*v / weights[j].max(1.0)).max(VARIANCE_FLOOR);
        }
        weights[j] /= n as f64;
    }
    if weights.contains(&0.0) {
        let w = 1.0 / k as f64;
        weights.iter_mut().for_each(|x| *x = w);
    }

    let mut resp = vec![vec![0.0; k]; n];
    let mut ll = e_step(points, &weights, &means, &variances, &mut resp);
    let mut history = vec![ll];
    let mut converged = false;
    for _ in 0..EM_MAX_ITERATIONS {
        for j in 0..k {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            if nk <= 1e-12 {
                continue;
            }
            weights[j] = nk / n as f64;
            for t in 0..d {
                let mu = resp.iter().zip(points).map(|(r, p)| r[j] * p[t]).sum::<f64>() / nk;
                let var = resp.iter().zip(points).map(|(r, p)| r[j] * (p[t] - mu) * (p[t] - mu)).sum::<f64>() / nk;
                means[j][t] = mu;
                variances[j][t] = var.max(VARIANCE_FLOOR);
            }
        }
        let next = e_step(points, &weights, &means, &variances, &mut resp);
        history.push(next);
        let delta = next - ll;
        ll = next;
        if delta.abs() < EM_TOLERANCE {
            converged = true;
            break;
        }
    }
    Ok(GmmResult { weights, means, variances, responsibilities: resp, log_likelihood: ll, history, converged })
}

fn e_step(
    points: &[Vec<f64>],
    weights: &[f64],
    means: &[Vec<f64>],
    variances: &[Vec<f64>],
    resp: &mut [Vec<f64>],
) -> f64 {
    let k = weights.len();
    let mut ll = 0.0;
    for (p, r) in points.iter().zip(resp.iter_mut()) {
        for j in 0..k {
            r[j] = weights[j].ln() + log_normal_diag(p, &means[j], &variances[j]);
        }
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = r.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for v in r.iter_mut() {
            *v = (*v - lse).exp();
        }
        ll += lse;
    }
    ll
}

fn log_normal_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter().zip(mean).zip(var).map(|((x, m), v)| -0.5 * ((2.0 * PI * v).ln() + (x - m) * (x - m) / v)).sum()
}

/// `(AIC, BIC)`.
pub fn information_criteria(loglik: f64, n_params: usize, n_points: usize) -> (f64, f64) {
    let p = n_params as f64;
    (2.0 * p - 2.0 * loglik, p * (n_points.max(1) as f64).ln() - 2.0 * loglik)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCriteria {
    pub k: usize,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub aic: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionChangepoints {
    pub transition: Transition,
    pub years: Vec<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeSettings {
    pub k_max: usize,
    pub seed: u64,
    pub restarts: usize,
    /// Splits per transition in the CUSUM segmentation.
    pub max_changes: usize,
    pub min_segment: usize,
    /// Minimum squared-error reduction for a CUSUM split.
    pub min_gain: f64,
}

impl Default for RegimeSettings {
    fn default() -> Self {
        Self { k_max: 6, seed: 0, restarts: 10, max_changes: 4, min_segment: 2, min_gain: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub years: Vec<i32>,
    pub labels: Vec<usize>,
    /// Years whose label differs from the previous year's.
    pub changepoints: Vec<i32>,
    pub criteria: Vec<ModelCriteria>,
    pub chosen_k: usize,
    pub cusum_changepoints: Vec<TransitionChangepoints>,
    pub notes: Vec<String>,
}

/// Fits mixtures for `k = 1..=k_max` (capped by the number of years), picks
/// the lowest BIC (ties to the smaller k) and segments each transition's
/// CUSUM chart.
pub fn regime_report(
    series: &FeatureVectorSeries,
    settings: &RegimeSettings,
    exec: Execution,
) -> Result<RegimeReport, RegimeError> {
    let points = &series.vectors;
    let n = points.len();
    let k_max = settings.k_max.clamp(1, n);
    let mut fits = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let init = kmeans_best(points, k, settings.seed, settings.restarts, exec)?;
        fits.push(gmm_from_kmeans(points, &init)?);
    }
    let criteria: Vec<ModelCriteria> = fits
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let (aic, bic) = information_criteria(f.log_likelihood, f.n_params(), n);
            ModelCriteria { k: i + 1, log_likelihood: f.log_likelihood, n_params: f.n_params(), aic, bic }
        })
        .collect();
    let mut chosen = 0;
    for (i, c) in criteria.iter().enumerate() {
        if c.bic < criteria[chosen].bic {
            chosen = i;
        }
    }
    let labels = fits[chosen].labels();
    let changepoints = (1..n).filter(|&i| labels[i] != labels[i - 1]).map(|i| series.years[i]).collect();

    let cusum_changepoints = FREE_PARAMETERS
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let cuts =
                binary_segmentation(&series.column(k), settings.max_changes, settings.min_segment, settings.min_gain)?;
            Ok(TransitionChangepoints { transition: *t, years: cuts.iter().map(|&i| series.years[i]).collect() })
        })
        .collect::<Result<Vec<_>, RegimeError>>()?;

    Ok(RegimeReport {
        years: series.years.clone(),
        labels,
        changepoints,
        criteria,
        chosen_k: chosen + 1,
        cusum_changepoints,
        notes: vec!["Lagrange-multiplier regime-switching test not implemented".into()],
    })
}

impl RegimeReport {
    pub fn write_json<W: Write>(&self, sink: W) -> Result<(), RegimeError> {
        serde_json::to_writer_pretty(sink, self).map_err(|e| RegimeError::Io(e.to_string()))
    }
}

/// CUSUM chart of every free parameter, one column per transition.
pub fn write_cusum_csv<W: Write>(series: &FeatureVectorSeries, sink: W) -> Result<(), RegimeError> {
    let io = |e: csv::Error| RegimeError::Io(e.to_string());
    let charts = (0..N_FREE).map(|k| cusum(&series.column(k), None)).collect::<Result<Vec<_>, _>>()?;
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["year".to_string()];
    header.extend(FREE_PARAMETERS.iter().map(|t| t.label()));
    w.write_record(&header).map_err(io)?;
    for (i, year) in series.years.iter().enumerate() {
        let mut rec = vec![year.to_string()];
        rec.extend(charts.iter().map(|c| c[i].to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| RegimeError::Io(e.to_string()))
}
