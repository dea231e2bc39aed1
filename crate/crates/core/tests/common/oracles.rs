//! Oracles shared by the integration tests and the acceptance target.

use buildout_core::estimation::{
    estimate_sequence, estimate_year, one_hop_bounds, BoundEntry, ConstraintScenario, YearEstimate,
};
use buildout_core::exec::{map_indexed, stream_rng};
use buildout_core::forecast::{forecast_from_history, normalize_rows, ForecastSettings};
use buildout_core::ingestion::{AnnualObservation, CategorizeContext, CategorizeRules};
use buildout_core::model::{raw_from_free, vec_mat, RawMatrix, FREE_PARAMETERS, N_FREE};
use buildout_core::stats::linreg_ci;
use buildout_core::synth::{expected_observations, simulate, SynthSpec};
use buildout_core::{Execution, StateVector, TransitionMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{reference_matrix, reference_spec};

/// Objective written out from its definition, independent of the solver's
/// quadratic form.
pub fn oracle_objective(x: &StateVector, next: &StateVector, p: &RawMatrix, prior: &RawMatrix, lambda: f64) -> f64 {
    let pred = vec_mat(&x.counts, p);
    let data: f64 = pred.iter().zip(&next.counts).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut reg = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            reg += (p[i][j] - prior[i][j]).powi(2);
        }
    }
    data + lambda * reg
}

pub fn pinned_scenario(
    theta: &[f64; N_FREE],
    free: &[(usize, f64, f64)],
    year: i32,
    lambda: f64,
) -> ConstraintScenario {
    let bounds = FREE_PARAMETERS
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let (lo, hi) = free.iter().find(|f| f.0 == k).map_or((theta[k], theta[k]), |f| (f.1, f.2));
            BoundEntry { from: t.from, to: t.to, year_start: year, year_end: year, lo, hi }
        })
        .collect();
    ConstraintScenario { bounds, lambda: Some(lambda), ..Default::default() }
}

pub struct GridCase {
    pub x: StateVector,
    pub next: StateVector,
    pub prior: TransitionMatrix,
    pub theta: [f64; N_FREE],
    pub free: Vec<(usize, f64, f64)>,
    pub lambda: f64,
}

pub fn grid_case(seed: u64) -> GridCase {
    let mut rng = stream_rng(seed, 31);
    let mut counts = [0.0; 5];
    for c in counts.iter_mut() {
        *c = rng.random_range(1..=5) as f64;
    }
    let x = StateVector::new(counts, 2010).unwrap();
    let rand_theta = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut t = [0.0; N_FREE];
        for v in t.iter_mut() {
            *v = (rng.random_range(0..=60) as f64) * 0.001;
        }
        t
    };
    let truth = rand_theta(&mut rng);
    let mut next = vec_mat(&x.counts, &raw_from_free(&truth));
    // Move a little mass between owner categories so the fit is not exact.
    let shift = rng.random_range(0.0..0.3f64).min(next[0]);
    next[0] -= shift;
    next[2] += shift;
    let next = StateVector::new(next, 2011).unwrap();
    let prior = TransitionMatrix::from_free(&rand_theta(&mut rng), 2009).unwrap();
    let theta = rand_theta(&mut rng);
    let n_free = 1 + (seed as usize % 3);
    let mut free = Vec::new();
    while free.len() < n_free {
        let k = rng.random_range(0..N_FREE);
        if free.iter().any(|f: &(usize, f64, f64)| f.0 == k) {
            continue;
        }
        let lo = rng.random_range(0..=50) as f64 * 0.001;
        let width = rng.random_range(40..=100) as f64 * 0.001;
        free.push((k, lo, lo + width));
    }
    GridCase { x, next, prior, theta, free, lambda: rng.random_range(0.05..2.0) }
}

pub fn grid_minimum(case: &GridCase) -> f64 {
    let steps: Vec<usize> = case.free.iter().map(|f| ((f.2 - f.1) / 0.001).round() as usize + 1).collect();
    let value = |f: usize, i: usize| case.free[f].1 + i as f64 * 0.001;
    let outer = steps[0];
    let best = map_indexed(outer, Execution::Parallel, |i0| {
        let mut theta = case.theta;
        let mut best = f64::INFINITY;
        let s1 = steps.get(1).copied().unwrap_or(1);
        let s2 = steps.get(2).copied().unwrap_or(1);
        theta[case.free[0].0] = value(0, i0);
        for i1 in 0..s1 {
            if case.free.len() > 1 {
                theta[case.free[1].0] = value(1, i1);
            }
            for i2 in 0..s2 {
                if case.free.len() > 2 {
                    theta[case.free[2].0] = value(2, i2);
                }
                let raw = raw_from_free(&theta);
                if (0..4).any(|r| raw[r][r] < 0.0) {
                    continue;
                }
                best = best.min(oracle_objective(&case.x, &case.next, &raw, case.prior.entries(), case.lambda));
            }
        }
        best
    });
    best.into_iter().fold(f64::INFINITY, f64::min)
}

pub fn lots_context(spec: &SynthSpec, years: usize) -> (Vec<BoundEntry>, Vec<AnnualObservation>) {
    let out = simulate(spec, years).unwrap();
    let ctx = CategorizeContext::new(&out.lots, CategorizeRules::default());
    let last = spec.first_year + years as i32 - 1;
    let bounds = one_hop_bounds(&out.lots, &ctx, &[(spec.first_year, last)], 2.0, 0.0);
    (bounds, expected_observations(spec, years).unwrap())
}

pub const HISTORY_END: usize = 6;

/// Fraction of (trial, year) pairs whose 95% band covers the realized
/// permits and buildout, forecasting 4 years from a 6-year fitted history.
pub fn coverage(trials: u64) -> (f64, f64) {
    let (mut permits_hit, mut buildout_hit, mut total) = (0, 0, 0);
    for t in 0..trials {
        let spec = reference_spec(1000 + t);
        let out = simulate(&spec, 10).unwrap();
        let ctx = CategorizeContext::new(&out.lots, CategorizeRules::default());
        let bounds = one_hop_bounds(&out.lots, &ctx, &[(2000, 2000 + HISTORY_END as i32 - 1)], 2.0, 0.0);
        let history = &out.observations[..=HISTORY_END];
        let fit = estimate_sequence(history, &ConstraintScenario { bounds, ..Default::default() }).unwrap();
        let settings = ForecastSettings { horizon: 4, seed: t, ..Default::default() };
        let run = forecast_from_history(history, &fit.matrices, &settings, 2000.0, Execution::Parallel).unwrap();
        for row in run.series.forecast_rows() {
            let truth = out.observations.iter().find(|o| o.year == row.year).unwrap();
            let p = row.permits_ci.unwrap();
            let b = row.buildout_ci.unwrap();
            let built = truth.category_counts.permits() / 2000.0;
            permits_hit += usize::from(p.low <= truth.permits_issued && truth.permits_issued <= p.high);
            buildout_hit += usize::from(b.low <= built && built <= b.high);
            total += 1;
        }
    }
    (permits_hit as f64 / total as f64, buildout_hit as f64 / total as f64)
}

pub fn random_free(rng: &mut impl Rng) -> [f64; N_FREE] {
    let mut p = [0.0; N_FREE];
    for v in p.iter_mut() {
        *v = rng.random_range(0.0..0.25);
    }
    p
}

/// Trials out of `trials` whose 95% slope interval contains the true slope.
pub fn slope_coverage(trials: u64) -> usize {
    (0..trials)
        .filter(|&t| {
            let mut rng = stream_rng(t, 9);
            let x: Vec<f64> = (0..15).map(f64::from).collect();
            let y: Vec<f64> = x.iter().map(|v| -1.3 * v + 4.0 + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let f = linreg_ci(&x, &y, 0.95).unwrap();
            f.slope_ci.0 <= -1.3 && -1.3 <= f.slope_ci.1
        })
        .count()
}

/// Solver fit of a grid case: the estimate, its objective recomputed from
/// the definition, and the grid minimum.
pub fn grid_check(seed: u64) -> (YearEstimate, f64, f64) {
    let case = grid_case(seed);
    let scenario = pinned_scenario(&case.theta, &case.free, 2010, case.lambda);
    let est = estimate_year(&case.x, &case.next, &scenario, Some(&case.prior), None)
        .unwrap_or_else(|e| panic!("grid case {seed}: {e}"));
    let direct = oracle_objective(&case.x, &case.next, est.matrix.entries(), case.prior.entries(), case.lambda);
    let grid = grid_minimum(&case);
    (est, direct, grid)
}

/// Per-year `(year, L∞ error, residual)` of the fit to the noise-free
/// trajectory of the reference market, bounded by one-hop frequencies from
/// a seeded simulation.
pub fn recovery(seed: u64, years: usize) -> Vec<(i32, f64, f64)> {
    let spec = reference_spec(seed);
    let (bounds, obs) = lots_context(&spec, years);
    let r = estimate_sequence(&obs, &ConstraintScenario { bounds, ..Default::default() }).unwrap();
    let truth = reference_matrix(spec.first_year);
    r.matrices.iter().zip(&r.residuals).map(|(m, res)| (m.year(), m.max_abs_diff(&truth), *res)).collect()
}

/// Rows of `n` random valid matrices that change when normalized twice.
pub fn normalize_not_idempotent(n: i32) -> usize {
    let mut rng = stream_rng(8, 0);
    let mut bad = 0;
    for i in 0..n {
        let m = TransitionMatrix::from_free(&random_free(&mut rng), i).unwrap();
        let (once, w) = normalize_rows(m.entries(), i).unwrap();
        let (twice, _) = normalize_rows(once.entries(), i).unwrap();
        if !w.is_empty() || once != twice {
            bad += 1;
        }
    }
    bad
}
