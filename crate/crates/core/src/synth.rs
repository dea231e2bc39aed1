//! Synthetic markets with known transition matrices.
//!
//! Every lot walks its own Markov chain, one multinomial draw per year, and
//! the walk is written out as transaction records whose evidence fields
//! (contractor flag, adjacency, lot counts, completion sales) lead
//! [`crate::ingestion::categorize`] back to the true category. Each lot draws
//! from its own ChaCha stream, so parallel and sequential runs agree exactly.

use chrono::NaiveDate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_indexed, stream_rng, Execution};
use crate::ingestion::{AnnualObservation, IngestError, LotHistory, TransactionRecord};
use crate::model::{step, ModelError, OwnerCategory, RawMatrix, StateVector, TransitionMatrix, N_STATES};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("initial counts sum to {sum}, platted lots is {platted}")]
    CountMismatch { sum: u64, platted: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// A matrix that takes effect from `year` (a step year) onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeChange {
    pub year: i32,
    pub matrix: RawMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub platted: u64,
    /// Initial lots per state in canonical order (F, B, P, A, R).
    pub initial: [u64; N_STATES],
    pub first_year: i32,
    pub matrix: RawMatrix,
    #[serde(default)]
    pub regime_changes: Vec<RegimeChange>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn constant(
        platted: u64,
        initial: [u64; N_STATES],
        first_year: i32,
        matrix: &TransitionMatrix,
        seed: u64,
    ) -> Self {
        Self { platted, initial, first_year, matrix: *matrix.entries(), regime_changes: Vec::new(), seed }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let sum: u64 = self.initial.iter().sum();
        if sum != self.platted {
            return Err(SynthError::CountMismatch { sum, platted: self.platted });
        }
        TransitionMatrix::new(self.matrix, self.first_year)?;
        for rc in &self.regime_changes {
            TransitionMatrix::new(rc.matrix, rc.year)?;
        }
        Ok(())
    }

    /// True matrix for the step from `year` to `year + 1`.
    pub fn matrix_for_year(&self, year: i32) -> Result<TransitionMatrix, ModelError> {
        let raw = self
            .regime_changes
            .iter()
            .filter(|rc| rc.year <= year)
            .max_by_key(|rc| rc.year)
            .map(|rc| rc.matrix)
            .unwrap_or(self.matrix);
        TransitionMatrix::new(raw, year)
    }

    pub fn initial_state(&self) -> StateVector {
        let mut counts = [0.0; N_STATES];
        for (c, n) in counts.iter_mut().zip(self.initial) {
            *c = n as f64;
        }
        StateVector { counts, year: self.first_year }
    }

    fn initial_category(&self, lot: usize) -> OwnerCategory {
        let mut acc = 0u64;
        for cat in OwnerCategory::ALL {
            acc += self.initial[cat.index()];
            if (lot as u64) < acc {
                return cat;
            }
        }
        OwnerCategory::Permits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub lots: Vec<LotHistory>,
    /// One per year, `first_year ..= first_year + years`.
    pub observations: Vec<AnnualObservation>,
    /// One per step year, `first_year .. first_year + years`.
    pub true_matrices: Vec<TransitionMatrix>,
    /// `labels[lot][k]` is the lot's state at the end of `first_year + k`.
    pub labels: Vec<Vec<OwnerCategory>>,
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid calendar date")
}

fn purchase(lot_id: &str, when: NaiveDate, cat: OwnerCategory, tag: &str) -> TransactionRecord {
    use OwnerCategory::*;
    let (contractor, adjacent, count) = match cat {
        Builders => (true, false, 1),
        Adjacents => (false, true, 2),
        Flippers => (false, false, 3),
        Prospects | Permits => (false, false, 1),
    };
    TransactionRecord {
        lot_id: lot_id.to_string(),
        date: when,
        price: None,
        buyer_id: format!("{}-{lot_id}-{tag}", cat.code()),
        buyer_is_contractor: contractor,
        instrument: "WD".into(),
        adjacent_to_owner_residence: adjacent,
        owner_lot_count: count,
        row: 0,
    }
}

fn sample_row(row: &[f64; N_STATES], u: f64) -> OwnerCategory {
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return OwnerCategory::ALL[j];
        }
    }
    // u landed in the rounding gap above the row sum: take the last nonzero.
    let j = row.iter().rposition(|p| *p > 0.0).unwrap_or(0);
    OwnerCategory::ALL[j]
}

fn lot_rng(seed: u64, lot: usize) -> ChaCha8Rng {
    stream_rng(seed, lot as u64)
}

/// Simulates `years` steps of every lot.
pub fn simulate(spec: &SynthSpec, years: usize) -> Result<SynthOutput, SynthError> {
    simulate_with(spec, years, Execution::default())
}

pub fn simulate_with(spec: &SynthSpec, years: usize, exec: Execution) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let true_matrices =
        (0..years).map(|k| spec.matrix_for_year(spec.first_year + k as i32)).collect::<Result<Vec<_>, _>>()?;
    let width = spec.platted.max(1).to_string().len().max(4);
    let first = spec.first_year;

    let per_lot = map_indexed(spec.platted as usize, exec, |i| {
        let mut rng = lot_rng(spec.seed, i);
        let lot_id = format!("L{i:0width$}");
        let start = spec.initial_category(i);
        let mut labels = Vec::with_capacity(years + 1);
        labels.push(start);
        let mut txs = Vec::new();
        let mut permit_year = None;
        if start == OwnerCategory::Permits {
            txs.push(purchase(&lot_id, date(first - 2, 3, 1), OwnerCategory::Prospects, "0"));
            permit_year = Some(first - 1);
        } else {
            txs.push(purchase(&lot_id, date(first, 1, 15), start, "0"));
        }
        let mut cur = start;
        for (k, m) in true_matrices.iter().enumerate() {
            let year = first + k as i32 + 1;
            let u: f64 = rng.random();
            let next = if cur.is_absorbing() { cur } else { sample_row(&m.entries()[cur.index()], u) };
            if next != cur {
                if next == OwnerCategory::Permits {
                    permit_year = Some(year);
                    if cur == OwnerCategory::Builders {
                        // Spec house sold to its first resident on completion.
                        txs.push(purchase(&lot_id, date(year + 1, 9, 1), OwnerCategory::Prospects, "home"));
                    }
                } else {
                    txs.push(purchase(&lot_id, date(year, 6, 15), next, &year.to_string()));
                }
            }
            cur = next;
            labels.push(cur);
        }
        let lot = LotHistory::new(lot_id, txs, permit_year, permit_year.map(|p| p + 1));
        (lot, labels)
    });

    let mut lots = Vec::with_capacity(per_lot.len());
    let mut labels = Vec::with_capacity(per_lot.len());
    for (lot, l) in per_lot {
        lots.push(lot?);
        labels.push(l);
    }
    let observations = tally(spec, &labels, years)?;
    Ok(SynthOutput { lots, observations, true_matrices, labels })
}

/// Yearly observations straight from the true labels.
fn tally(spec: &SynthSpec, labels: &[Vec<OwnerCategory>], years: usize) -> Result<Vec<AnnualObservation>, SynthError> {
    use OwnerCategory::*;
    let mut out = Vec::with_capacity(years + 1);
    for k in 0..=years {
        let year = spec.first_year + k as i32;
        let mut counts = [0.0; N_STATES];
        let mut issued = 0.0;
        let (mut custom, mut spec_homes) = (0usize, 0usize);
        for l in labels {
            counts[l[k].index()] += 1.0;
            if k > 0 && l[k] == Permits && l[k - 1] != Permits {
                issued += 1.0;
            }
            // Homes completed this year were permitted last year; the holder
            // is the owner before that permit.
            let holder = if k == 0 && l[0] == Permits {
                Some(Prospects)
            } else if k >= 2 && l[k - 1] == Permits && l[k - 2] != Permits {
                Some(l[k - 2])
            } else {
                None
            };
            match holder {
                Some(Prospects) => custom += 1,
                Some(Builders) => spec_homes += 1,
                _ => {}
            }
        }
        let total = custom + spec_homes;
        out.push(AnnualObservation {
            year,
            category_counts: StateVector::new(counts, year)?,
            permits_issued: issued,
            custom_ratio: (total > 0).then(|| custom as f64 / total as f64),
            unsold: 0.0,
        });
    }
    Ok(out)
}

/// Deterministic expectation: the initial counts pushed through the true
/// matrices. Returns `years + 1` states, starting with the initial one.
pub fn expected_trajectory(spec: &SynthSpec, years: usize) -> Result<Vec<StateVector>, SynthError> {
    spec.validate()?;
    let mut x = spec.initial_state();
    let mut out = vec![x];
    for k in 0..years {
        let m = spec.matrix_for_year(spec.first_year + k as i32)?;
        x = step(&x, &m)?;
        out.push(x);
    }
    Ok(out)
}

/// Observations built from expected (fractional) counts, with no sampling
/// noise. Custom ratios are left empty.
pub fn expected_observations(spec: &SynthSpec, years: usize) -> Result<Vec<AnnualObservation>, SynthError> {
    let states = expected_trajectory(spec, years)?;
    let mut out: Vec<AnnualObservation> = Vec::with_capacity(states.len());
    for (k, s) in states.iter().enumerate() {
        let issued = if k == 0 { 0.0 } else { s.permits() - states[k - 1].permits() };
        out.push(AnnualObservation {
            year: s.year,
            category_counts: *s,
            permits_issued: issued,
            custom_ratio: None,
            unsold: 0.0,
        });
    }
    Ok(out)
}

/// Ground-truth companion to a synthetic `transactions.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SynthSpec,
    pub years: usize,
    pub matrices: Vec<TransitionMatrix>,
    pub observations: Vec<AnnualObservation>,
    /// lot_id → state per year.
    pub labels: Vec<(String, Vec<OwnerCategory>)>,
}

impl Truth {
    pub fn new(spec: &SynthSpec, years: usize, out: &SynthOutput) -> Self {
        Self {
            spec: spec.clone(),
            years,
            matrices: out.true_matrices.clone(),
            observations: out.observations.clone(),
            labels: out.lots.iter().zip(&out.labels).map(|(lot, l)| (lot.lot_id.clone(), l.clone())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{annual_observations, CategorizeContext, CategorizeRules};
    use OwnerCategory::*;

    fn prospects_permit_all() -> TransitionMatrix {
        let mut m = TransitionMatrix::identity(0).entries().to_owned();
        m[2][2] = 0.0;
        m[2][4] = 1.0;
        TransitionMatrix::new(m, 0).unwrap()
    }

    #[test]
    fn identity_means_no_activity() {
        let spec = SynthSpec::constant(40, [10, 10, 10, 10, 0], 2000, &TransitionMatrix::identity(2000), 7);
        let out = simulate(&spec, 5).unwrap();
        assert!(out.lots.iter().all(|l| l.transactions.len() == 1 && l.permit_year.is_none()));
        assert!(out.observations.iter().all(|o| o.permits_issued == 0.0));
        assert!(out.observations.iter().all(|o| o.category_counts.counts == [10.0, 10.0, 10.0, 10.0, 0.0]));
    }

    #[test]
    fn prospects_all_permit_in_year_one() {
        let spec = SynthSpec::constant(25, [0, 0, 25, 0, 0], 2010, &prospects_permit_all(), 1);
        let out = simulate(&spec, 3).unwrap();
        assert_eq!(out.observations[1].permits_issued, 25.0);
        assert_eq!(out.observations[1].category_counts.permits(), 25.0);
        assert!(out.lots.iter().all(|l| l.permit_year == Some(2011)));
        assert_eq!(out.observations[2].custom_ratio, Some(1.0));
    }

    #[test]
    fn expected_trajectory_cases() {
        let spec = SynthSpec::constant(40, [10, 10, 10, 10, 0], 2000, &TransitionMatrix::identity(2000), 0);
        let states = expected_trajectory(&spec, 3).unwrap();
        assert_eq!(states.len(), 4);
        assert!(states.iter().all(|s| s.counts == [10.0, 10.0, 10.0, 10.0, 0.0]));

        let mut m = *TransitionMatrix::identity(0).entries();
        m[1][1] = 0.5;
        m[1][4] = 0.5;
        let spec = SynthSpec::constant(200, [10, 20, 30, 40, 100], 2000, &TransitionMatrix::new(m, 0).unwrap(), 0);
        assert_eq!(expected_trajectory(&spec, 1).unwrap()[1].counts, [10.0, 10.0, 30.0, 40.0, 110.0]);

        let spec = SynthSpec::constant(0, [0; 5], 2000, &prospects_permit_all(), 0);
        assert!(expected_trajectory(&spec, 2).unwrap().iter().all(|s| s.total() == 0.0));
    }

    #[test]
    fn spec_validation() {
        let spec = SynthSpec::constant(41, [10, 10, 10, 10, 0], 2000, &TransitionMatrix::identity(2000), 0);
        assert!(matches!(simulate(&spec, 1), Err(SynthError::CountMismatch { .. })));
    }

    #[test]
    fn regime_change_applies_from_year() {
        let mut spec = SynthSpec::constant(10, [0, 0, 10, 0, 0], 2000, &TransitionMatrix::identity(0), 0);
        spec.regime_changes.push(RegimeChange { year: 2002, matrix: *prospects_permit_all().entries() });
        let out = simulate(&spec, 4).unwrap();
        let issued: Vec<_> = out.observations.iter().map(|o| o.permits_issued).collect();
        assert_eq!(issued, [0.0, 0.0, 0.0, 10.0, 0.0]);
        assert_eq!(spec.matrix_for_year(2001).unwrap().get(Prospects, Permits), 0.0);
    }

    #[test]
    fn ingestion_recovers_labels() {
        let p = [0.05, 0.04, 0.03, 0.05, 0.06, 0.02, 0.2, 0.03, 0.03, 0.02, 0.1, 0.02, 0.03, 0.02];
        let m = TransitionMatrix::from_free(&p, 0).unwrap();
        let spec = SynthSpec::constant(300, [60, 50, 100, 40, 50], 1995, &m, 11);
        let out = simulate(&spec, 8).unwrap();
        let ctx = CategorizeContext::new(&out.lots, CategorizeRules::default());
        let obs = annual_observations(&out.lots, 1995, 2003, 300, &ctx).unwrap();
        assert_eq!(obs, out.observations);
    }
}
