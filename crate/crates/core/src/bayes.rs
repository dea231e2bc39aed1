//! Time-to-permit distributions and the posterior expected number of
//! permits for lots already held for some years.
//!
//! A lot bought `t_i` years ago and still unpermitted can only permit at
//! offsets beyond `t_i`, so its prior is truncated and renormalized:
//! `posterior(t) = P(t + t_i) / S(t_i)` for `t >= 1`, where
//! `S(t_i) = Σ_{k > t_i} P(k)`.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::{categorize, permit_holder, CategorizeContext, LotHistory};
use crate::model::OwnerCategory;

pub const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BayesError {
    #[error("pmf masses must be finite and >= 0 (offset {offset} has {value})")]
    NegativeMass { offset: u32, value: f64 },
    #[error("pmf masses sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("lot held {held} years is beyond the distribution's support")]
    BeyondSupport { held: u32 },
    #[error("lot category {lot} does not match distribution category {pmf}")]
    CategoryMismatch { pmf: OwnerCategory, lot: OwnerCategory },
    #[error("series lengths differ: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("no permitted {0} lots to fit a distribution")]
    NoPermittedLots(OwnerCategory),
    #[error("failed to write output: {0}")]
    Io(String),
}

/// Probability of permitting `offset` years after purchase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PmfRepr", into = "PmfRepr")]
pub struct TimeToPermitPMF {
    category: OwnerCategory,
    mass: BTreeMap<u32, f64>,
}

#[derive(Serialize, Deserialize)]
struct PmfRepr {
    category: OwnerCategory,
    mass: Vec<(u32, f64)>,
}

impl TryFrom<PmfRepr> for TimeToPermitPMF {
    type Error = BayesError;

    fn try_from(r: PmfRepr) -> Result<Self, Self::Error> {
        TimeToPermitPMF::new(r.category, r.mass.into_iter().collect())
    }
}

impl From<TimeToPermitPMF> for PmfRepr {
    fn from(p: TimeToPermitPMF) -> Self {
        PmfRepr { category: p.category, mass: p.mass.into_iter().collect() }
    }
}

impl TimeToPermitPMF {
    pub fn new(category: OwnerCategory, mass: BTreeMap<u32, f64>) -> Result<Self, BayesError> {
        for (&offset, &value) in &mass {
            if !(value.is_finite() && value >= 0.0) {
                return Err(BayesError::NegativeMass { offset, value });
            }
        }
        let sum: f64 = mass.values().sum();
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(BayesError::NotNormalized(sum));
        }
        Ok(Self { category, mass })
    }

    pub fn category(&self) -> OwnerCategory {
        self.category
    }

    pub fn mass(&self) -> &BTreeMap<u32, f64> {
        &self.mass
    }

    pub fn get(&self, offset: u32) -> f64 {
        self.mass.get(&offset).copied().unwrap_or(0.0)
    }

    /// `Σ_{k > held} P(k)`.
    pub fn survival(&self, held: u32) -> f64 {
        self.mass.range(held + 1..).map(|(_, p)| p).sum()
    }

    pub fn write_json<W: Write>(&self, sink: W) -> Result<(), BayesError> {
        serde_json::to_writer_pretty(sink, self).map_err(|e| BayesError::Io(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldLot {
    pub category: OwnerCategory,
    pub held: u32,
}

/// Distribution of years until permit for a lot held `held` years.
pub fn posterior(pmf: &TimeToPermitPMF, held: u32) -> Result<BTreeMap<u32, f64>, BayesError> {
    let s = pmf.survival(held);
    if s <= 0.0 {
        return Err(BayesError::BeyondSupport { held });
    }
    Ok(pmf.mass.range(held + 1..).map(|(&k, &p)| (k - held, p / s)).collect())
}

/// Expected permits in each of the next `horizon` years from `lots`.
pub fn expected_category_permits(
    pmf: &TimeToPermitPMF,
    lots: &[HeldLot],
    horizon: u32,
) -> Result<Vec<f64>, BayesError> {
    let mut out = vec![0.0; horizon as usize];
    for lot in lots {
        if lot.category != pmf.category {
            return Err(BayesError::CategoryMismatch { pmf: pmf.category, lot: lot.category });
        }
        for (t, p) in posterior(pmf, lot.held)? {
            if t <= horizon {
                out[t as usize - 1] += p;
            }
        }
    }
    Ok(out)
}

/// Element-wise sum of per-category expectations.
pub fn expected_total_permits(per_category: &[Vec<f64>]) -> Result<Vec<f64>, BayesError> {
    let lens: Vec<usize> = per_category.iter().map(Vec::len).collect();
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(BayesError::LengthMismatch(lens));
    }
    let n = lens.first().copied().unwrap_or(0);
    Ok((0..n).map(|t| per_category.iter().map(|v| v[t]).sum()).collect())
}

/// Histogram of permit offsets. Each censored duration adds its share to a
/// single offset one past the largest permitted offset or censored duration.
pub fn pmf_from_offsets(
    category: OwnerCategory,
    permitted: &[u32],
    censored: &[u32],
) -> Result<TimeToPermitPMF, BayesError> {
    if permitted.is_empty() {
        return Err(BayesError::NoPermittedLots(category));
    }
    let n = (permitted.len() + censored.len()) as f64;
    let mut mass = BTreeMap::new();
    for &k in permitted {
        *mass.entry(k).or_insert(0.0) += 1.0;
    }
    if !censored.is_empty() {
        let sentinel = permitted.iter().chain(censored).max().copied().unwrap_or(0) + 1;
        *mass.entry(sentinel).or_insert(0.0) += censored.len() as f64;
    }
    for v in mass.values_mut() {
        *v /= n;
    }
    TimeToPermitPMF::new(category, mass)
}

/// Fits a pmf from lot histories as of the end of `as_of_year`.
///
/// Permitted lots contribute `permit_year - purchase_year` when the owner
/// holding the lot at permit time was in `category`. Lots still unpermitted
/// and owned by `category` at `as_of_year` are censored at their holding time.
pub fn fit_pmf(
    lots: &[LotHistory],
    category: OwnerCategory,
    ctx: &CategorizeContext,
    as_of_year: i32,
) -> Result<TimeToPermitPMF, BayesError> {
    let mut permitted = Vec::new();
    let mut censored = Vec::new();
    for lot in lots {
        match lot.permit_year {
            Some(p) if p <= as_of_year => {
                if let Some((cat, bought)) = permit_holder(lot, ctx) {
                    if cat == category {
                        permitted.push((p - bought).max(0) as u32);
                    }
                }
            }
            _ => {
                if let Some(h) = held_lot(lot, ctx, as_of_year).filter(|h| h.category == category) {
                    censored.push(h.held);
                }
            }
        }
    }
    pmf_from_offsets(category, &permitted, &censored)
}

/// Category and holding time of an unpermitted lot at the end of `as_of_year`.
pub fn held_lot(lot: &LotHistory, ctx: &CategorizeContext, as_of_year: i32) -> Option<HeldLot> {
    let category = categorize(lot, as_of_year, ctx).ok()?;
    let k = lot.owner_index_at(as_of_year)?;
    let bought = lot.transactions[k].date.year();
    Some(HeldLot { category, held: (as_of_year - bought).max(0) as u32 })
}
