//! Per-year transition-matrix estimation from aggregate category counts.
//!
//! One year gives five balance equations for fourteen free probabilities, so
//! the fit is regularized toward a prior matrix:
//!
//! ```text
//! minimize  ‖x_t·P − x_{t+1}‖² + λ‖P − prior‖²_F + w·h(P)²
//! subject to  P row-stochastic, structural zeros, scenario bounds
//! ```
//!
//! where `h` is the custom-ratio violation measured in lots. The solver is
//! accelerated projected gradient over the free parameters; each owner row is
//! projected onto `{lo ≤ p ≤ hi, Σp ≤ 1}` and its diagonal takes the slack.
//! A final active-set Newton step solves the quadratic on the detected face
//! exactly when that point is feasible and no worse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::{categorize, AnnualObservation, CategorizeContext, LotHistory};
use crate::model::{
    free_params_of_row, raw_from_free, vec_mat, ModelError, OwnerCategory, StateVector, Transition, TransitionMatrix,
    FREE_PARAMETERS, N_FREE, N_STATES,
};

const BOUND_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("year {year}: scenario lower bounds exceed 1 in row(s) {}", fmt_rows(.rows))]
    Infeasible { year: i32, rows: Vec<(OwnerCategory, f64)> },
    #[error("year {year}: {message}")]
    Precondition { year: i32, message: String },
    #[error("need at least 2 consecutive observations, got {0}")]
    TooFewObservations(usize),
    #[error("observation years {prev} and {next} are not consecutive")]
    NonConsecutive { prev: i32, next: i32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn fmt_rows(rows: &[(OwnerCategory, f64)]) -> String {
    rows.iter().map(|(c, s)| format!("{} (Σlo = {s})", c.code())).collect::<Vec<_>>().join(", ")
}

/// Bounds on one free transition over a range of step years (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub from: OwnerCategory,
    pub to: OwnerCategory,
    pub year_start: i32,
    pub year_end: i32,
    pub lo: f64,
    pub hi: f64,
}

impl BoundEntry {
    pub fn transition(&self) -> Transition {
        Transition::new(self.from, self.to)
    }

    fn covers(&self, year: i32) -> bool {
        (self.year_start..=self.year_end).contains(&year)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Stop when no free parameter moves more than this between iterations.
    pub tolerance: f64,
    /// Run the active-set refinement after the gradient phase.
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { max_iterations: 10_000, tolerance: 1e-8, polish: true }
    }
}

/// Constraint scenario file: bounds, regularization and the custom-ratio
/// penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintScenario {
    pub bounds: Vec<BoundEntry>,
    /// Tikhonov weight; `None` means `0.1 × total lots`.
    pub lambda: Option<f64>,
    pub ratio_tol: f64,
    /// Penalty weight relative to the data term.
    pub ratio_weight: f64,
    pub solver: SolverSettings,
}

impl Default for ConstraintScenario {
    fn default() -> Self {
        Self {
            bounds: Vec::new(),
            lambda: None,
            ratio_tol: 0.05,
            ratio_weight: 10.0,
            solver: SolverSettings::default(),
        }
    }
}

impl ConstraintScenario {
    pub fn validate(&self) -> Result<(), EstimationError> {
        let bad = |m: String| Err(EstimationError::Scenario(m));
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return bad(format!("lambda must be >= 0, got {l}"));
            }
        }
        if !(self.ratio_tol.is_finite() && self.ratio_tol >= 0.0) {
            return bad(format!("ratio_tol must be >= 0, got {}", self.ratio_tol));
        }
        if !(self.ratio_weight.is_finite() && self.ratio_weight >= 0.0) {
            return bad(format!("ratio_weight must be >= 0, got {}", self.ratio_weight));
        }
        for (i, b) in self.bounds.iter().enumerate() {
            let t = b.transition();
            if t.free_index().is_none() {
                return bad(format!("bound {i}: {t} is not a free transition"));
            }
            if !(0.0..=1.0).contains(&b.lo) || !(0.0..=1.0).contains(&b.hi) || b.lo > b.hi {
                return bad(format!("bound {i} on {t}: need 0 <= lo <= hi <= 1, got [{}, {}]", b.lo, b.hi));
            }
            if b.year_start > b.year_end {
                return bad(format!("bound {i} on {t}: year_start after year_end"));
            }
            for (j, other) in self.bounds.iter().enumerate().take(i) {
                if other.transition() == t && other.year_start <= b.year_end && b.year_start <= other.year_end {
                    return bad(format!("bounds {j} and {i} on {t} have overlapping year ranges"));
                }
            }
        }
        Ok(())
    }

    /// Lower and upper bounds of every free parameter for a step year.
    pub fn bounds_for_year(&self, year: i32) -> ([f64; N_FREE], [f64; N_FREE], [bool; N_FREE]) {
        let mut lo = [0.0; N_FREE];
        let mut hi = [1.0; N_FREE];
        let mut explicit = [false; N_FREE];
        for b in self.bounds.iter().filter(|b| b.covers(year)) {
            if let Some(k) = b.transition().free_index() {
                lo[k] = b.lo;
                hi[k] = b.hi;
                explicit[k] = true;
            }
        }
        (lo, hi, explicit)
    }

    pub fn lambda_for(&self, total_lots: f64) -> f64 {
        self.lambda.unwrap_or(0.1 * total_lots)
    }

    /// Widens every bound around its midpoint. Each side moves out by
    /// `(factor − 1) × max(hi − lo, 0.05) / 2`, clipped to [0, 1].
    pub fn relaxed(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for b in &mut out.bounds {
            let margin = (factor - 1.0).max(0.0) * (b.hi - b.lo).max(0.05) / 2.0;
            b.lo = (b.lo - margin).max(0.0);
            b.hi = (b.hi + margin).min(1.0);
        }
        out
    }
}

/// A bound that holds with equality at the solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveBound {
    pub transition: Transition,
    pub side: BoundSide,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    Lower,
    Upper,
    /// `lo == hi`.
    Pinned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearEstimate {
    pub matrix: TransitionMatrix,
    /// `‖x_t·P − x_{t+1}‖₂` in lots.
    pub residual: f64,
    pub objective: f64,
    pub active: Vec<ActiveBound>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub matrices: Vec<TransitionMatrix>,
    pub residuals: Vec<f64>,
    pub active_constraints: Vec<Vec<ActiveBound>>,
    pub objectives: Vec<f64>,
}

/// Excess of the custom share of the permit flow over its tolerance band.
///
/// `|x_P·p_PR / (x_B·p_BR + x_P·p_PR) − ratio| − tol`, clamped at zero; zero
/// when there is no permit flow.
pub fn custom_ratio_constraint(x_t: &StateVector, p: &TransitionMatrix, ratio: f64, tol: f64) -> f64 {
    use OwnerCategory::{Builders, Permits, Prospects};
    let custom = x_t.get(Prospects) * p.get(Prospects, Permits);
    let flow = custom + x_t.get(Builders) * p.get(Builders, Permits);
    if flow <= 0.0 {
        return 0.0;
    }
    ((custom / flow - ratio).abs() - tol).max(0.0)
}

/// Quadratic program over the 14 free parameters of one year.
#[derive(Debug, Clone)]
struct YearProblem {
    h: [[f64; N_FREE]; N_FREE],
    g: [f64; N_FREE],
    c: f64,
    lo: [f64; N_FREE],
    hi: [f64; N_FREE],
    /// Hinge penalty `w·max(0, |u·θ| − tol·b·θ)²`, absent without a ratio.
    penalty: Option<(f64, [f64; N_FREE], [f64; N_FREE])>,
}

impl YearProblem {
    fn build(
        x_t: &StateVector,
        x_next: &StateVector,
        prior: &[f64; N_FREE],
        lambda: f64,
        lo: [f64; N_FREE],
        hi: [f64; N_FREE],
        ratio: Option<(f64, f64, f64)>,
    ) -> Self {
        // Residual at θ = 0 (identity) and its Jacobian.
        let r0: Vec<f64> = (0..N_STATES).map(|j| x_t.counts[j] - x_next.counts[j]).collect();
        let mut jac = [[0.0; N_FREE]; N_STATES];
        for (k, t) in FREE_PARAMETERS.iter().enumerate() {
            let xi = x_t.counts[t.from.index()];
            jac[t.to.index()][k] += xi;
            jac[t.from.index()][k] -= xi;
        }
        let mut h = [[0.0; N_FREE]; N_FREE];
        let mut g = [0.0; N_FREE];
        let mut c: f64 = r0.iter().map(|v| v * v).sum();
        for a in 0..N_FREE {
            for b in 0..N_FREE {
                h[a][b] = 2.0 * (0..N_STATES).map(|j| jac[j][a] * jac[j][b]).sum::<f64>();
            }
            g[a] = 2.0 * (0..N_STATES).map(|j| jac[j][a] * r0[j]).sum::<f64>();
        }
        // λ(Σ(θ−q)² + Σ_rows(s(θ) − s(q))²), s = free-parameter row sum.
        for k in 0..N_FREE {
            h[k][k] += 2.0 * lambda;
            g[k] -= 2.0 * lambda * prior[k];
            c += lambda * prior[k] * prior[k];
        }
        for row in 0..4 {
            let range = free_params_of_row(row);
            let sq: f64 = range.clone().map(|k| prior[k]).sum();
            for a in range.clone() {
                for b in range.clone() {
                    h[a][b] += 2.0 * lambda;
                }
                g[a] -= 2.0 * lambda * sq;
            }
            c += lambda * sq * sq;
        }
        let penalty = ratio.map(|(r, tol, w)| {
            use OwnerCategory::{Builders, Prospects};
            let (kb, kp) = (6, 10);
            let mut u = [0.0; N_FREE];
            let mut b = [0.0; N_FREE];
            u[kp] = (1.0 - r) * x_t.get(Prospects);
            u[kb] = -r * x_t.get(Builders);
            b[kp] = tol * x_t.get(Prospects);
            b[kb] = tol * x_t.get(Builders);
            (w, u, b)
        });
        Self { h, g, c, lo, hi, penalty }
    }

    fn hinge(&self, theta: &[f64; N_FREE]) -> Option<(f64, f64)> {
        let (_, u, b) = self.penalty.as_ref()?;
        let ut = dot(u, theta);
        let bt = dot(b, theta);
        let h = ut.abs() - bt;
        (h > 0.0).then_some((h, ut.signum()))
    }

    fn objective(&self, theta: &[f64; N_FREE]) -> f64 {
        let mut f = self.c + dot(&self.g, theta);
        for a in 0..N_FREE {
            f += 0.5 * theta[a] * dot(&self.h[a], theta);
        }
        if let (Some((h, _)), Some((w, _, _))) = (self.hinge(theta), self.penalty.as_ref()) {
            f += w * h * h;
        }
        f
    }

    fn gradient(&self, theta: &[f64; N_FREE]) -> [f64; N_FREE] {
        let mut grad = self.g;
        for a in 0..N_FREE {
            grad[a] += dot(&self.h[a], theta);
        }
        if let (Some((h, s)), Some((w, u, b))) = (self.hinge(theta), self.penalty.as_ref()) {
            for k in 0..N_FREE {
                grad[k] += 2.0 * w * h * (s * u[k] - b[k]);
            }
        }
        grad
    }

    fn lipschitz(&self) -> f64 {
        let mut l = max_eigenvalue_sym(&self.h);
        if let Some((w, u, b)) = &self.penalty {
            let nu = dot(u, u).sqrt() + dot(b, b).sqrt();
            l += 2.0 * w * nu * nu;
        }
        l.max(1e-12)
    }

    fn project(&self, theta: &mut [f64; N_FREE]) {
        for row in 0..4 {
            let r = free_params_of_row(row);
            project_row(&mut theta[r.clone()], &self.lo[r.clone()], &self.hi[r]);
        }
    }
}

fn dot(a: &[f64; N_FREE], b: &[f64; N_FREE]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean projection of `v` onto `{lo ≤ v ≤ hi, Σv ≤ 1}`; needs `Σlo ≤ 1`.
/// The result's sum never exceeds 1 in floating point.
pub fn project_row(v: &mut [f64], lo: &[f64], hi: &[f64]) {
    let clip = |x: f64, i: usize| x.clamp(lo[i], hi[i]);
    for i in 0..v.len() {
        v[i] = clip(v[i], i);
    }
    if v.iter().sum::<f64>() > 1.0 {
        // Σ clip(v − τ) is non-increasing in τ; bisect for Σ = 1.
        let orig: Vec<f64> = v.to_vec();
        let mut a = 0.0;
        let mut b = orig.iter().zip(lo).map(|(x, l)| x - l).fold(0.0, f64::max);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let s: f64 = orig.iter().enumerate().map(|(i, x)| clip(x - mid, i)).sum();
            if s > 1.0 {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= f64::EPSILON * b.max(1e-300) {
                break;
            }
        }
        for i in 0..v.len() {
            v[i] = clip(orig[i] - b, i);
        }
    }
    // Shave rounding excess off the entry with the most room above its bound.
    for _ in 0..8 {
        let excess = v.iter().sum::<f64>() - 1.0;
        if excess <= 0.0 {
            break;
        }
        let Some(i) = (0..v.len()).filter(|&i| v[i] > lo[i]).max_by(|&a, &b| (v[a] - lo[a]).total_cmp(&(v[b] - lo[b])))
        else {
            break;
        };
        v[i] = (v[i] - excess.max(f64::EPSILON)).max(lo[i]);
    }
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotation.
fn max_eigenvalue_sym(m: &[[f64; N_FREE]; N_FREE]) -> f64 {
    let mut a = *m;
    let n = N_FREE;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Projected gradient with Nesterov momentum and gradient-based restart.
fn solve(problem: &YearProblem, start: [f64; N_FREE], settings: &SolverSettings) -> ([f64; N_FREE], usize) {
    let step = 1.0 / problem.lipschitz();
    let mut x = start;
    problem.project(&mut x);
    let mut y = x;
    let mut t = 1.0f64;
    let mut iterations = 0;
    for it in 0..settings.max_iterations {
        iterations = it + 1;
        let grad = problem.gradient(&y);
        let mut next = y;
        for k in 0..N_FREE {
            next[k] -= step * grad[k];
        }
        problem.project(&mut next);
        let change = (0..N_FREE).map(|k| (next[k] - x[k]).abs()).fold(0.0, f64::max);
        // Restart momentum when it points uphill.
        let uphill: f64 = (0..N_FREE).map(|k| (y[k] - next[k]) * (next[k] - x[k])).sum();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if uphill > 0.0 {
            t = 1.0;
            y = next;
        } else {
            let beta = (t - 1.0) / t_next;
            for k in 0..N_FREE {
                y[k] = next[k] + beta * (next[k] - x[k]);
            }
            t = t_next;
        }
        x = next;
        if change < settings.tolerance {
            break;
        }
    }
    (x, iterations)
}

/// Newton step on the face identified at `theta`: parameters at a bound are
/// held fixed, rows with zero diagonal keep their sum at 1 and the penalty
/// branch is frozen. Returns `None` when the face system is singular or the
/// solution leaves the feasible set.
fn polish(problem: &YearProblem, theta: &[f64; N_FREE]) -> Option<[f64; N_FREE]> {
    const ACT: f64 = 1e-9;
    let fixed: Vec<bool> = (0..N_FREE)
        .map(|k| problem.lo[k] == problem.hi[k] || theta[k] - problem.lo[k] <= ACT || problem.hi[k] - theta[k] <= ACT)
        .collect();
    let full_rows: Vec<usize> = (0..4)
        .filter(|&r| {
            let s: f64 = free_params_of_row(r).map(|k| theta[k]).sum();
            1.0 - s <= ACT && free_params_of_row(r).any(|k| !fixed[k])
        })
        .collect();

    let mut h = problem.h;
    let g = problem.g;
    if let (Some((_, sign)), Some((w, u, b))) = (problem.hinge(theta), problem.penalty.as_ref()) {
        let mut a = [0.0; N_FREE];
        for k in 0..N_FREE {
            a[k] = sign * u[k] - b[k];
        }
        for i in 0..N_FREE {
            for j in 0..N_FREE {
                h[i][j] += 2.0 * w * a[i] * a[j];
            }
        }
    }

    let free: Vec<usize> = (0..N_FREE).filter(|&k| !fixed[k]).collect();
    if free.is_empty() {
        return None;
    }
    let pos = |k: usize| free.iter().position(|&f| f == k);
    let n = free.len() + full_rows.len();
    let mut a = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for (i, &ki) in free.iter().enumerate() {
        for (j, &kj) in free.iter().enumerate() {
            a[i][j] = h[ki][kj];
        }
        // Fixed coordinates move to the right-hand side.
        rhs[i] = -g[ki] - (0..N_FREE).filter(|&k| fixed[k]).map(|k| h[ki][k] * theta[k]).sum::<f64>();
    }
    for (e, &row) in full_rows.iter().enumerate() {
        let ci = free.len() + e;
        let mut fixed_sum = 0.0;
        for k in free_params_of_row(row) {
            match pos(k) {
                Some(i) => {
                    a[i][ci] = 1.0;
                    a[ci][i] = 1.0;
                }
                None => fixed_sum += theta[k],
            }
        }
        rhs[ci] = 1.0 - fixed_sum;
    }
    let sol = solve_dense(a, rhs)?;
    let mut out = *theta;
    for (i, &k) in free.iter().enumerate() {
        out[k] = sol[i];
    }
    // Multipliers of full rows must push the sum against its cap.
    for e in 0..full_rows.len() {
        if sol[free.len() + e] < -1e-9 * (1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            return None;
        }
    }
    for &k in &free {
        if out[k] < problem.lo[k] - 1e-12 || out[k] > problem.hi[k] + 1e-12 {
            return None;
        }
        out[k] = out[k].clamp(problem.lo[k], problem.hi[k]);
    }
    for row in 0..4 {
        let s: f64 = free_params_of_row(row).map(|k| out[k]).sum();
        if s > 1.0 + 1e-12 {
            return None;
        }
    }
    problem.project(&mut out);
    // The frozen penalty branch must still be the right one.
    let same_branch = match (problem.hinge(theta), problem.hinge(&out)) {
        (Some((_, s1)), Some((_, s2))) => s1 == s2,
        (None, None) => true,
        _ => false,
    };
    same_branch.then_some(out)
}

fn check_preconditions(x_t: &StateVector, x_next: &StateVector) -> Result<(), EstimationError> {
    let (a, b) = (x_t.total(), x_next.total());
    if (a - b).abs() > 1e-9 * a.max(b).max(1.0) {
        return Err(EstimationError::Precondition {
            year: x_t.year,
            message: format!("lot totals differ between years ({a} vs {b})"),
        });
    }
    if x_next.permits() < x_t.permits() {
        return Err(EstimationError::Precondition {
            year: x_t.year,
            message: format!("cumulative permits decrease ({} -> {})", x_t.permits(), x_next.permits()),
        });
    }
    if x_next.year != x_t.year + 1 {
        return Err(EstimationError::NonConsecutive { prev: x_t.year, next: x_next.year });
    }
    Ok(())
}

/// Fits the transition matrix for the step `x_t -> x_next`.
///
/// `custom_ratio` is the target custom share of the permits issued during
/// the step; `None` disables that penalty. Without a prior the fit is pulled
/// toward the feasible matrix with the largest diagonal (every free
/// parameter at its lower bound).
pub fn estimate_year(
    x_t: &StateVector,
    x_next: &StateVector,
    scenario: &ConstraintScenario,
    prior: Option<&TransitionMatrix>,
    custom_ratio: Option<f64>,
) -> Result<YearEstimate, EstimationError> {
    scenario.validate()?;
    check_preconditions(x_t, x_next)?;
    let year = x_t.year;
    let (lo, hi, explicit) = scenario.bounds_for_year(year);

    let rows: Vec<(OwnerCategory, f64)> = (0..4)
        .filter_map(|r| {
            let s: f64 = free_params_of_row(r).map(|k| lo[k]).sum();
            (s > 1.0 + BOUND_EPS).then(|| (OwnerCategory::ALL[r], s))
        })
        .collect();
    if !rows.is_empty() {
        return Err(EstimationError::Infeasible { year, rows });
    }

    let prior_theta = match prior {
        Some(p) => p.free_params(),
        None => lo,
    };
    let lambda = scenario.lambda_for(x_t.total());
    let ratio = custom_ratio.map(|r| (r, scenario.ratio_tol, scenario.ratio_weight));
    let problem = YearProblem::build(x_t, x_next, &prior_theta, lambda, lo, hi, ratio);

    let (mut theta, iterations) = solve(&problem, prior_theta, &scenario.solver);
    if scenario.solver.polish {
        if let Some(p) = polish(&problem, &theta) {
            if problem.objective(&p) <= problem.objective(&theta) {
                theta = p;
            }
        }
    }
    let objective = problem.objective(&theta);
    let matrix = TransitionMatrix::new(raw_from_free(&theta), year)?;

    let predicted = vec_mat(&x_t.counts, matrix.entries());
    let residual = predicted.iter().zip(&x_next.counts).map(|(p, o)| (p - o) * (p - o)).sum::<f64>().sqrt();

    let active = FREE_PARAMETERS
        .iter()
        .enumerate()
        .filter(|(k, _)| explicit[*k])
        .filter_map(|(k, &t)| {
            let side = if lo[k] == hi[k] {
                BoundSide::Pinned
            } else if theta[k] <= lo[k] + 1e-9 {
                BoundSide::Lower
            } else if theta[k] >= hi[k] - 1e-9 {
                BoundSide::Upper
            } else {
                return None;
            };
            Some(ActiveBound { transition: t, side, value: theta[k] })
        })
        .collect();

    Ok(YearEstimate { matrix, residual, objective, active, iterations })
}

/// Fits one matrix per consecutive pair of observations, each year's fit
/// serving as the next year's prior.
///
/// The custom-ratio target for the step from year `t` is the ratio observed
/// for homes completed in `t + 2`: permits issued during the step are dated
/// `t + 1` and completion follows a year later.
pub fn estimate_sequence(
    observations: &[AnnualObservation],
    scenario: &ConstraintScenario,
) -> Result<EstimationResult, EstimationError> {
    if observations.len() < 2 {
        return Err(EstimationError::TooFewObservations(observations.len()));
    }
    for w in observations.windows(2) {
        if w[1].year != w[0].year + 1 {
            return Err(EstimationError::NonConsecutive { prev: w[0].year, next: w[1].year });
        }
    }
    let mut result = EstimationResult {
        matrices: Vec::new(),
        residuals: Vec::new(),
        active_constraints: Vec::new(),
        objectives: Vec::new(),
    };
    let mut prior: Option<TransitionMatrix> = None;
    for (i, w) in observations.windows(2).enumerate() {
        let ratio = observations.get(i + 2).and_then(|o| o.custom_ratio);
        let est = estimate_year(&w[0].category_counts, &w[1].category_counts, scenario, prior.as_ref(), ratio)?;
        prior = Some(est.matrix);
        result.matrices.push(est.matrix);
        result.residuals.push(est.residual);
        result.active_constraints.push(est.active);
        result.objectives.push(est.objective);
    }
    Ok(result)
}

/// Year-by-year counts of lots moving between states, read off individual
/// lot histories: `counts[y - first_year][from][to]` for the step `y -> y + 1`.
pub fn one_hop_counts(
    lots: &[LotHistory],
    ctx: &CategorizeContext,
    first_year: i32,
    last_year: i32,
) -> Vec<[[u64; N_STATES]; N_STATES]> {
    let state = |lot: &LotHistory, y: i32| -> Option<OwnerCategory> {
        if lot.is_permitted_by(y) {
            Some(OwnerCategory::Permits)
        } else {
            categorize(lot, y, ctx).ok()
        }
    };
    (first_year..last_year)
        .map(|y| {
            let mut n = [[0u64; N_STATES]; N_STATES];
            for lot in lots {
                if let (Some(a), Some(b)) = (state(lot, y), state(lot, y + 1)) {
                    n[a.index()][b.index()] += 1;
                }
            }
            n
        })
        .collect()
}

/// Constraint scenario bounds from observed one-hop sale and permit
/// frequencies, pooled over each step-year range (inclusive). Each free
/// transition with a nonempty source row gets
/// `f ± max(min_halfwidth, z·√(f(1−f)/n))` over its range.
pub fn one_hop_bounds(
    lots: &[LotHistory],
    ctx: &CategorizeContext,
    ranges: &[(i32, i32)],
    z: f64,
    min_halfwidth: f64,
) -> Vec<BoundEntry> {
    let mut out = Vec::new();
    for &(start, end) in ranges {
        let mut n = [[0u64; N_STATES]; N_STATES];
        for year in one_hop_counts(lots, ctx, start, end + 1) {
            for i in 0..N_STATES {
                for j in 0..N_STATES {
                    n[i][j] += year[i][j];
                }
            }
        }
        for t in FREE_PARAMETERS {
            let row = &n[t.from.index()];
            let total: u64 = row.iter().sum();
            if total == 0 {
                continue;
            }
            let f = row[t.to.index()] as f64 / total as f64;
            let hw = (z * (f * (1.0 - f) / total as f64).sqrt()).max(min_halfwidth);
            out.push(BoundEntry {
                from: t.from,
                to: t.to,
                year_start: start,
                year_end: end,
                lo: (f - hw).max(0.0),
                hi: (f + hw).min(1.0),
            });
        }
    }
    out
}
