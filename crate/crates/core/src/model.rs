//! Markov state space for lot ownership: owner categories, state vectors,
//! row-stochastic transition matrices and the one-year state update
//! `next = state · P`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of states (four owner categories plus the absorbing permit state).
pub const N_STATES: usize = 5;

/// Tolerance applied to every row-sum check.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Owner category of an unpermitted lot, plus the absorbing `Permits` state.
///
/// The declaration order is the canonical indexing order used by every
/// vector and matrix in the crate: Flippers, Builders, Prospects, Adjacents,
/// Permits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OwnerCategory {
    Flippers,
    Builders,
    Prospects,
    Adjacents,
    Permits,
}

impl OwnerCategory {
    pub const ALL: [OwnerCategory; N_STATES] = [
        OwnerCategory::Flippers,
        OwnerCategory::Builders,
        OwnerCategory::Prospects,
        OwnerCategory::Adjacents,
        OwnerCategory::Permits,
    ];

    /// The four categories that hold unpermitted lots.
    pub const OWNERS: [OwnerCategory; 4] =
        [OwnerCategory::Flippers, OwnerCategory::Builders, OwnerCategory::Prospects, OwnerCategory::Adjacents];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// One-letter code: F, B, P, A, R.
    pub const fn code(self) -> char {
        match self {
            OwnerCategory::Flippers => 'F',
            OwnerCategory::Builders => 'B',
            OwnerCategory::Prospects => 'P',
            OwnerCategory::Adjacents => 'A',
            OwnerCategory::Permits => 'R',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Self::ALL.iter().copied().find(|cat| cat.code() == c.to_ascii_uppercase())
    }

    pub const fn is_absorbing(self) -> bool {
        matches!(self, OwnerCategory::Permits)
    }

    /// Whether lots held by this category can move directly to `Permits`.
    pub const fn can_permit(self) -> bool {
        matches!(self, OwnerCategory::Builders | OwnerCategory::Prospects)
    }
}

impl fmt::Display for OwnerCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OwnerCategory::Flippers => "Flippers",
            OwnerCategory::Builders => "Builders",
            OwnerCategory::Prospects => "Prospects",
            OwnerCategory::Adjacents => "Adjacents",
            OwnerCategory::Permits => "Permits",
        };
        f.write_str(name)
    }
}

impl Serialize for OwnerCategory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Accepts full names (any case) or one-letter codes.
impl<'de> Deserialize<'de> for OwnerCategory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for OwnerCategory {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.chars().count() == 1 {
            if let Some(c) = Self::from_code(t.chars().next().unwrap()) {
                return Ok(c);
            }
        }
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.to_string().eq_ignore_ascii_case(t))
            .ok_or_else(|| ModelError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown owner category {0:?}")]
    UnknownCategory(String),
    #[error("state count for {category} is {value}, must be finite and >= 0")]
    InvalidCount { category: OwnerCategory, value: f64 },
    #[error("state year {state} does not match matrix year {matrix}")]
    YearMismatch { state: i32, matrix: i32 },
    #[error("years {prev} and {next} are not consecutive")]
    NonConsecutiveYears { prev: i32, next: i32 },
    #[error("invalid transition matrix for year {year}: {}", join_violations(.violations))]
    InvalidMatrix { year: i32, violations: Vec<Violation> },
    #[error("platted lot count must be positive, got {0}")]
    NonPositivePlatted(i64),
    #[error("state total {total} does not equal platted lots {platted}")]
    PlattedMismatch { total: f64, platted: i64 },
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Lot counts per category at the end of `year`. Counts are expected values
/// and may be fractional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub counts: [f64; N_STATES],
    pub year: i32,
}

impl StateVector {
    pub fn new(counts: [f64; N_STATES], year: i32) -> Result<Self, ModelError> {
        for cat in OwnerCategory::ALL {
            let value = counts[cat.index()];
            if !value.is_finite() || value < 0.0 {
                return Err(ModelError::InvalidCount { category: cat, value });
            }
        }
        Ok(Self { counts, year })
    }

    pub fn get(&self, cat: OwnerCategory) -> f64 {
        self.counts[cat.index()]
    }

    pub fn permits(&self) -> f64 {
        self.counts[OwnerCategory::Permits.index()]
    }

    /// Unpermitted lots across the four owner categories.
    pub fn unpermitted(&self) -> f64 {
        self.counts[..4].iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Which transition-matrix rule a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    NonFinite,
    OutOfRange,
    RowSum,
    StructuralZero,
    AbsorbingRow,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::NonFinite => "non-finite entry",
            Rule::OutOfRange => "entry outside [0,1]",
            Rule::RowSum => "row does not sum to 1",
            Rule::StructuralZero => "structural zero is nonzero",
            Rule::AbsorbingRow => "permit row is not absorbing",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub row: OwnerCategory,
    /// `None` for whole-row rules.
    pub col: Option<OwnerCategory>,
    pub rule: Rule,
    /// Absolute distance from the nearest admissible value.
    pub deviation: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.col {
            Some(c) => {
                write!(f, "{} at ({}, {}), deviation {:e}", self.rule, self.row.code(), c.code(), self.deviation)
            }
            None => write!(f, "{} in row {}, deviation {:e}", self.rule, self.row.code(), self.deviation),
        }
    }
}

/// A `(from, to)` position of the transition matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub from: OwnerCategory,
    pub to: OwnerCategory,
}

impl Transition {
    pub const fn new(from: OwnerCategory, to: OwnerCategory) -> Self {
        Self { from, to }
    }

    /// Positions fixed at zero: permits from Flippers or Adjacents.
    pub fn is_structural_zero(self) -> bool {
        self.to == OwnerCategory::Permits && !self.from.can_permit() && !self.from.is_absorbing()
    }

    /// Position in [`FREE_PARAMETERS`], if this is a free parameter.
    pub fn free_index(self) -> Option<usize> {
        FREE_PARAMETERS.iter().position(|t| *t == self)
    }

    pub fn label(self) -> String {
        format!("{}->{}", self.from.code(), self.to.code())
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from.code(), self.to.code())
    }
}

impl std::str::FromStr for Transition {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once("->").ok_or_else(|| ModelError::UnknownCategory(s.to_string()))?;
        Ok(Transition::new(a.parse()?, b.parse()?))
    }
}

use OwnerCategory::{Adjacents as A, Builders as B, Flippers as F, Permits as R, Prospects as P};

/// Number of free transition probabilities.
pub const N_FREE: usize = 14;

/// The free parameters in canonical order: row by row (F, B, P, A), skipping
/// the diagonal (fixed by the row sum) and the structural zeros.
pub const FREE_PARAMETERS: [Transition; N_FREE] = [
    Transition::new(F, B),
    Transition::new(F, P),
    Transition::new(F, A),
    Transition::new(B, F),
    Transition::new(B, P),
    Transition::new(B, A),
    Transition::new(B, R),
    Transition::new(P, F),
    Transition::new(P, B),
    Transition::new(P, A),
    Transition::new(P, R),
    Transition::new(A, F),
    Transition::new(A, B),
    Transition::new(A, P),
];

/// Indices into [`FREE_PARAMETERS`] of the two permit flows, B->R and P->R.
pub const PERMIT_FLOW_PARAMS: [usize; 2] = [6, 10];

/// Range of [`FREE_PARAMETERS`] indices belonging to owner row `row` (0..4).
pub fn free_params_of_row(row: usize) -> std::ops::Range<usize> {
    match row {
        0 => 0..3,
        1 => 3..7,
        2 => 7..11,
        3 => 11..14,
        _ => 0..0,
    }
}

/// Raw 5×5 matrix of reals, no invariants.
pub type RawMatrix = [[f64; N_STATES]; N_STATES];

/// Row-stochastic transition matrix for the step from `year` to `year + 1`.
///
/// Constructed only through [`TransitionMatrix::new`] (which validates) or
/// from free parameters; the entries are read-only afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct TransitionMatrix {
    entries: RawMatrix,
    year: i32,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    year: i32,
    entries: RawMatrix,
}

impl TryFrom<MatrixRepr> for TransitionMatrix {
    type Error = ModelError;

    fn try_from(r: MatrixRepr) -> Result<Self, Self::Error> {
        TransitionMatrix::new(r.entries, r.year)
    }
}

impl From<TransitionMatrix> for MatrixRepr {
    fn from(m: TransitionMatrix) -> Self {
        MatrixRepr { year: m.year, entries: m.entries }
    }
}

impl TransitionMatrix {
    pub fn new(entries: RawMatrix, year: i32) -> Result<Self, ModelError> {
        let violations = validate_entries(&entries);
        if violations.is_empty() {
            Ok(Self { entries, year })
        } else {
            Err(ModelError::InvalidMatrix { year, violations })
        }
    }

    pub fn identity(year: i32) -> Self {
        let mut entries = [[0.0; N_STATES]; N_STATES];
        for (i, row) in entries.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { entries, year }
    }

    /// Builds a matrix from the 14 free parameters, with each diagonal set to
    /// one minus the rest of its row.
    pub fn from_free(params: &[f64; N_FREE], year: i32) -> Result<Self, ModelError> {
        Self::new(raw_from_free(params), year)
    }

    pub fn entries(&self) -> &RawMatrix {
        &self.entries
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn with_year(mut self, year: i32) -> Self {
        self.year = year;
        self
    }

    pub fn get(&self, from: OwnerCategory, to: OwnerCategory) -> f64 {
        self.entries[from.index()][to.index()]
    }

    pub fn free_params(&self) -> [f64; N_FREE] {
        let mut out = [0.0; N_FREE];
        for (k, t) in FREE_PARAMETERS.iter().enumerate() {
            out[k] = self.get(t.from, t.to);
        }
        out
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_entries(&self.entries)
    }

    /// Matrix product `self · other`; the result carries `self`'s year.
    pub fn compose(&self, other: &TransitionMatrix) -> RawMatrix {
        mat_mul(&self.entries, &other.entries)
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &TransitionMatrix) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..N_STATES {
            for j in 0..N_STATES {
                d = d.max((self.entries[i][j] - other.entries[i][j]).abs());
            }
        }
        d
    }
}

/// Raw matrix from free parameters; diagonals are `1 - Σ(free in row)` and may
/// be negative if the parameters overflow the row.
pub fn raw_from_free(params: &[f64; N_FREE]) -> RawMatrix {
    let mut m = [[0.0; N_STATES]; N_STATES];
    for (k, t) in FREE_PARAMETERS.iter().enumerate() {
        m[t.from.index()][t.to.index()] = params[k];
    }
    for (row, entries) in m.iter_mut().enumerate().take(4) {
        let off: f64 = free_params_of_row(row).map(|k| params[k]).sum();
        entries[row] = 1.0 - off;
    }
    m[R.index()][R.index()] = 1.0;
    m
}

pub fn mat_mul(a: &RawMatrix, b: &RawMatrix) -> RawMatrix {
    let mut out = [[0.0; N_STATES]; N_STATES];
    for i in 0..N_STATES {
        for k in 0..N_STATES {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..N_STATES {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Row vector times matrix.
pub fn vec_mat(x: &[f64; N_STATES], m: &RawMatrix) -> [f64; N_STATES] {
    let mut out = [0.0; N_STATES];
    for i in 0..N_STATES {
        if x[i] == 0.0 {
            continue;
        }
        for j in 0..N_STATES {
            out[j] += x[i] * m[i][j];
        }
    }
    out
}

/// Lists every broken transition-matrix rule. An empty list means the matrix
/// is accepted by [`step`].
pub fn validate(matrix: &RawMatrix) -> Vec<Violation> {
    validate_entries(matrix)
}

fn validate_entries(m: &RawMatrix) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, row) in m.iter().enumerate() {
        let from = OwnerCategory::ALL[i];
        let mut finite = true;
        for (j, &v) in row.iter().enumerate() {
            let to = OwnerCategory::ALL[j];
            if !v.is_finite() {
                finite = false;
                out.push(Violation { row: from, col: Some(to), rule: Rule::NonFinite, deviation: f64::INFINITY });
                continue;
            }
            if from.is_absorbing() {
                let want = if j == i { 1.0 } else { 0.0 };
                if v != want {
                    out.push(Violation {
                        row: from,
                        col: Some(to),
                        rule: Rule::AbsorbingRow,
                        deviation: (v - want).abs(),
                    });
                }
                continue;
            }
            if Transition::new(from, to).is_structural_zero() && v != 0.0 {
                out.push(Violation { row: from, col: Some(to), rule: Rule::StructuralZero, deviation: v.abs() });
                continue;
            }
            if v < 0.0 {
                out.push(Violation { row: from, col: Some(to), rule: Rule::OutOfRange, deviation: -v });
            } else if v > 1.0 {
                out.push(Violation { row: from, col: Some(to), rule: Rule::OutOfRange, deviation: v - 1.0 });
            }
        }
        if finite && !from.is_absorbing() {
            let dev = (row.iter().sum::<f64>() - 1.0).abs();
            if dev > ROW_SUM_TOL {
                out.push(Violation { row: from, col: None, rule: Rule::RowSum, deviation: dev });
            }
        }
    }
    out
}

/// One-year update `state · matrix`. The matrix year must equal the state
/// year; the result is dated one year later.
pub fn step(state: &StateVector, matrix: &TransitionMatrix) -> Result<StateVector, ModelError> {
    if state.year != matrix.year() {
        return Err(ModelError::YearMismatch { state: state.year, matrix: matrix.year() });
    }
    let violations = matrix.validate();
    if !violations.is_empty() {
        return Err(ModelError::InvalidMatrix { year: matrix.year(), violations });
    }
    let next = vec_mat(&state.counts, matrix.entries());
    Ok(StateVector { counts: next, year: state.year + 1 })
}

/// Permits issued during the step `prev -> next`.
pub fn annual_permits(prev: &StateVector, next: &StateVector) -> Result<f64, ModelError> {
    if next.year != prev.year + 1 {
        return Err(ModelError::NonConsecutiveYears { prev: prev.year, next: next.year });
    }
    Ok((next.permits() - prev.permits()).max(0.0))
}

/// Fraction of platted lots that are permitted.
pub fn buildout_pct(state: &StateVector, platted: i64) -> Result<f64, ModelError> {
    if platted <= 0 {
        return Err(ModelError::NonPositivePlatted(platted));
    }
    let p = platted as f64;
    let total = state.total();
    if (total - p).abs() > ROW_SUM_TOL * p.max(1.0) {
        return Err(ModelError::PlattedMismatch { total, platted });
    }
    Ok((state.permits() / p).clamp(0.0, 1.0))
}
