//! Transaction records in, yearly category tallies out.
//!
//! The input is a UTF-8 CSV with one row per lot transaction:
//!
//! ```text
//! lot_id,date,price,buyer_id,buyer_is_contractor,instrument,adjacent_to_owner_residence,owner_lot_count,permit_year,built_year
//! ```
//!
//! `adjacent_to_owner_residence` and `owner_lot_count` describe the buyer of
//! that row. `permit_year` and `built_year` are lot facts and may be left
//! empty on all but one row of a lot. When a lot has a `built_year` but no
//! `permit_year`, the permit is dated one year before completion.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, OwnerCategory, StateVector, N_STATES};

pub const TRANSACTION_COLUMNS: [&str; 10] = [
    "lot_id",
    "date",
    "price",
    "buyer_id",
    "buyer_is_contractor",
    "instrument",
    "adjacent_to_owner_residence",
    "owner_lot_count",
    "permit_year",
    "built_year",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed header: missing column(s) {}", .missing.join(", "))]
    Header { missing: Vec<String> },
    #[error("row {row} (line {line}): field `{field}`: {message}")]
    Row { row: usize, line: u64, field: String, message: String },
    #[error("lot {lot_id}: {message}")]
    Lot { lot_id: String, message: String },
    #[error("empty year range {first}..={last}")]
    EmptyYearRange { first: i32, last: i32 },
    #[error("platted lots ({platted}) fewer than lots in the records ({lots})")]
    PlattedTooSmall { platted: i64, lots: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CategorizeError {
    #[error("lot {lot_id} was permitted in {permit_year}, on or before {as_of_year}")]
    AlreadyPermitted { lot_id: String, permit_year: i32, as_of_year: i32 },
    #[error("lot {lot_id} has no owner as of {as_of_year}")]
    NoOwner { lot_id: String, as_of_year: i32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub lot_id: String,
    pub date: NaiveDate,
    pub price: Option<f64>,
    pub buyer_id: String,
    pub buyer_is_contractor: bool,
    pub instrument: String,
    pub adjacent_to_owner_residence: bool,
    pub owner_lot_count: u32,
    /// 1-based data row in the source file (0 for records built in memory).
    #[serde(default)]
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotHistory {
    pub lot_id: String,
    /// Ordered by date; same-date records keep file order.
    pub transactions: Vec<TransactionRecord>,
    pub permit_year: Option<i32>,
    /// True when `permit_year` was derived as `built_year - 1`.
    pub permit_year_inferred: bool,
    pub built_year: Option<i32>,
    /// Evidence about the current (latest) owner.
    pub adjacent_to_owner_residence: bool,
    pub owner_lot_count: u32,
}

impl LotHistory {
    /// Assembles a lot from its transactions, sorting them and resolving the
    /// permit-year fallback.
    pub fn new(
        lot_id: impl Into<String>,
        mut transactions: Vec<TransactionRecord>,
        permit_year: Option<i32>,
        built_year: Option<i32>,
    ) -> Result<Self, IngestError> {
        let lot_id = lot_id.into();
        if lot_id.is_empty() {
            return Err(IngestError::Lot { lot_id, message: "empty lot_id".into() });
        }
        if transactions.is_empty() {
            return Err(IngestError::Lot { lot_id, message: "no transactions".into() });
        }
        transactions.sort_by_key(|t| t.date);
        let (permit_year, inferred) = match (permit_year, built_year) {
            (Some(p), _) => (Some(p), false),
            (None, Some(b)) => (Some(b - 1), true),
            (None, None) => (None, false),
        };
        if let (Some(p), Some(b)) = (permit_year, built_year) {
            if p > b {
                return Err(IngestError::Lot { lot_id, message: format!("permit_year {p} is after built_year {b}") });
            }
        }
        let last = transactions.last().unwrap();
        Ok(Self {
            adjacent_to_owner_residence: last.adjacent_to_owner_residence,
            owner_lot_count: last.owner_lot_count,
            lot_id,
            transactions,
            permit_year,
            permit_year_inferred: inferred,
            built_year,
        })
    }

    /// Index of the transaction in force at the end of `year`.
    pub fn owner_index_at(&self, year: i32) -> Option<usize> {
        self.transactions.iter().rposition(|t| t.date.year() <= year)
    }

    pub fn is_permitted_by(&self, year: i32) -> bool {
        self.permit_year.is_some_and(|p| p <= year)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWarning {
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTransactions {
    /// One entry per distinct lot_id, ordered by lot_id.
    pub lots: Vec<LotHistory>,
    pub warnings: Vec<IngestWarning>,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "no" | "n" => Some(false),
        "1" | "true" | "yes" | "y" => Some(true),
        _ => None,
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    let head = match s.find('T') {
        Some(10) => &s[..10],
        _ => s,
    };
    NaiveDate::parse_from_str(head, "%Y-%m-%d").ok()
}

struct LotFacts {
    transactions: Vec<TransactionRecord>,
    permit_year: Option<i32>,
    built_year: Option<i32>,
}

/// Parses `transactions.csv` content into per-lot histories.
///
/// Duplicate `(lot_id, date, buyer_id)` rows are dropped with a warning (the
/// first one is kept), as are conflicting permit/built years on later rows.
pub fn parse_transactions<R: Read>(source: R) -> Result<ParsedTransactions, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(source);
    let headers = rdr.headers()?.clone();
    let mut col = BTreeMap::new();
    let mut missing = Vec::new();
    for name in TRANSACTION_COLUMNS {
        match headers.iter().position(|h| h == name) {
            Some(i) => {
                col.insert(name, i);
            }
            None => missing.push(name.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(IngestError::Header { missing });
    }

    let mut lots: BTreeMap<String, LotFacts> = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut warnings = Vec::new();

    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |name: &str| rec.get(col[name]).unwrap_or("");
        let bad = |name: &str, message: String| IngestError::Row { row, line, field: name.to_string(), message };

        let lot_id = field("lot_id").to_string();
        if lot_id.is_empty() {
            return Err(bad("lot_id", "empty lot identifier".into()));
        }
        let raw_date = field("date");
        let date = parse_date(raw_date).ok_or_else(|| bad("date", format!("unparseable date {raw_date:?}")))?;
        let price = match field("price") {
            "" => None,
            s => Some(
                s.replace([',', '$'], "").parse::<f64>().map_err(|_| bad("price", format!("not a number: {s:?}")))?,
            ),
        };
        let flag = |name: &str| {
            let s = field(name);
            parse_bool(s).ok_or_else(|| bad(name, format!("expected 0/1, got {s:?}")))
        };
        let buyer_is_contractor = flag("buyer_is_contractor")?;
        let adjacent = flag("adjacent_to_owner_residence")?;
        let owner_lot_count = match field("owner_lot_count") {
            "" => 1,
            s => s.parse::<u32>().map_err(|_| bad("owner_lot_count", format!("not a count: {s:?}")))?,
        };
        let year = |name: &str| -> Result<Option<i32>, IngestError> {
            match field(name) {
                "" => Ok(None),
                s => s.parse::<i32>().map(Some).map_err(|_| bad(name, format!("not a year: {s:?}"))),
            }
        };
        let permit_year = year("permit_year")?;
        let built_year = year("built_year")?;
        let buyer_id = field("buyer_id").to_string();

        if !seen.insert((lot_id.clone(), date, buyer_id.clone())) {
            warnings.push(IngestWarning {
                row,
                message: format!("duplicate transaction ({lot_id}, {date}, {buyer_id}); keeping the first"),
            });
            continue;
        }

        let facts = lots.entry(lot_id.clone()).or_insert_with(|| LotFacts {
            transactions: Vec::new(),
            permit_year: None,
            built_year: None,
        });
        for (name, new, slot) in
            [("permit_year", permit_year, &mut facts.permit_year), ("built_year", built_year, &mut facts.built_year)]
        {
            match (*slot, new) {
                (None, Some(v)) => *slot = Some(v),
                (Some(old), Some(v)) if old != v => warnings.push(IngestWarning {
                    row,
                    message: format!("lot {lot_id}: conflicting {name} {v}, keeping {old}"),
                }),
                _ => {}
            }
        }
        facts.transactions.push(TransactionRecord {
            lot_id,
            date,
            price,
            buyer_id,
            buyer_is_contractor,
            instrument: field("instrument").to_string(),
            adjacent_to_owner_residence: adjacent,
            owner_lot_count,
            row,
        });
    }

    let lots = lots
        .into_iter()
        .map(|(id, f)| LotHistory::new(id, f.transactions, f.permit_year, f.built_year))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ParsedTransactions { lots, warnings })
}

/// Writes lots back out in the `transactions.csv` schema.
pub fn write_transactions<W: Write>(lots: &[LotHistory], sink: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(TRANSACTION_COLUMNS)?;
    for lot in lots {
        for (k, t) in lot.transactions.iter().enumerate() {
            let opt = |v: Option<i32>| v.map(|y| y.to_string()).unwrap_or_default();
            // Lot facts go on the first row only.
            let (permit, built) = if k == 0 {
                let permit = if lot.permit_year_inferred { None } else { lot.permit_year };
                (opt(permit), opt(lot.built_year))
            } else {
                (String::new(), String::new())
            };
            w.write_record([
                t.lot_id.as_str(),
                &t.date.format("%Y-%m-%d").to_string(),
                &t.price.map(|p| p.to_string()).unwrap_or_default(),
                &t.buyer_id,
                if t.buyer_is_contractor { "1" } else { "0" },
                &t.instrument,
                if t.adjacent_to_owner_residence { "1" } else { "0" },
                &t.owner_lot_count.to_string(),
                &permit,
                &built,
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Tunable thresholds of the categorization rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CategorizeRules {
    /// An owner of several lots is a Flipper when the median holding period of
    /// their completed sales is at most this many years.
    pub flipper_max_median_holding_years: f64,
    /// A lot whose owner sold within this many years of the house's
    /// completion was held by a builder.
    pub builder_sale_window_years: i32,
}

impl Default for CategorizeRules {
    fn default() -> Self {
        Self { flipper_max_median_holding_years: 2.0, builder_sale_window_years: 1 }
    }
}

/// Completed holdings per buyer, across all lots.
#[derive(Debug, Clone, Default)]
pub struct OwnerIndex {
    /// buyer_id → (year of resale, years held)
    sales: BTreeMap<String, Vec<(i32, f64)>>,
}

impl OwnerIndex {
    pub fn build(lots: &[LotHistory]) -> Self {
        let mut sales: BTreeMap<String, Vec<(i32, f64)>> = BTreeMap::new();
        for lot in lots {
            for pair in lot.transactions.windows(2) {
                let held = (pair[1].date - pair[0].date).num_days() as f64 / 365.25;
                sales.entry(pair[0].buyer_id.clone()).or_default().push((pair[1].date.year(), held));
            }
        }
        Self { sales }
    }

    /// Median holding period of `buyer`'s sales completed by the end of `year`.
    pub fn median_holding(&self, buyer: &str, year: i32) -> Option<f64> {
        let mut held: Vec<f64> = self.sales.get(buyer)?.iter().filter(|(y, _)| *y <= year).map(|(_, h)| *h).collect();
        if held.is_empty() {
            return None;
        }
        held.sort_by(f64::total_cmp);
        let n = held.len();
        Some(if n % 2 == 1 { held[n / 2] } else { 0.5 * (held[n / 2 - 1] + held[n / 2]) })
    }
}

/// Cross-lot information needed by [`categorize`].
#[derive(Debug, Clone, Default)]
pub struct CategorizeContext {
    pub rules: CategorizeRules,
    pub owners: OwnerIndex,
}

impl CategorizeContext {
    pub fn new(lots: &[LotHistory], rules: CategorizeRules) -> Self {
        Self { rules, owners: OwnerIndex::build(lots) }
    }
}

/// Owner category of an unpermitted lot at the end of `as_of_year`.
///
/// Rules, first match wins:
/// 1. Builders: the buyer is a contractor, or the owner's tenure ended with a
///    sale within the builder window of the house's completion year.
/// 2. Adjacents: the buyer lives next door.
/// 3. Flippers: the buyer holds two or more lots and the median holding period
///    of their completed sales is within the flipper threshold. Buyers with no
///    completed sales yet pass on lot count alone.
/// 4. Prospects otherwise.
pub fn categorize(
    lot: &LotHistory,
    as_of_year: i32,
    ctx: &CategorizeContext,
) -> Result<OwnerCategory, CategorizeError> {
    if let Some(p) = lot.permit_year.filter(|&p| p <= as_of_year) {
        return Err(CategorizeError::AlreadyPermitted { lot_id: lot.lot_id.clone(), permit_year: p, as_of_year });
    }
    let k = lot
        .owner_index_at(as_of_year)
        .ok_or_else(|| CategorizeError::NoOwner { lot_id: lot.lot_id.clone(), as_of_year })?;
    let tx = &lot.transactions[k];

    let sold_near_completion = match (lot.built_year, lot.transactions.get(k + 1)) {
        (Some(built), Some(next)) => (next.date.year() - built).abs() <= ctx.rules.builder_sale_window_years,
        _ => false,
    };
    if tx.buyer_is_contractor || sold_near_completion {
        return Ok(OwnerCategory::Builders);
    }
    if tx.adjacent_to_owner_residence {
        return Ok(OwnerCategory::Adjacents);
    }
    if tx.owner_lot_count >= 2 {
        let quick = ctx
            .owners
            .median_holding(&tx.buyer_id, as_of_year)
            .is_none_or(|m| m <= ctx.rules.flipper_max_median_holding_years);
        if quick {
            return Ok(OwnerCategory::Flippers);
        }
    }
    Ok(OwnerCategory::Prospects)
}

/// Category of whoever held the lot when it was permitted, with the year
/// their tenure began. `None` for unpermitted lots or lots with no owner
/// before the permit year.
pub fn permit_holder(lot: &LotHistory, ctx: &CategorizeContext) -> Option<(OwnerCategory, i32)> {
    let permit = lot.permit_year?;
    let as_of = permit - 1;
    let k = lot.owner_index_at(as_of)?;
    let cat = categorize(lot, as_of, ctx).ok()?;
    Some((cat, lot.transactions[k].date.year()))
}

/// Share of custom (Prospect-permitted) homes among homes completed in
/// `year`; `None` when no Builder- or Prospect-permitted home was completed.
pub fn custom_spec_ratio(lots: &[LotHistory], year: i32, ctx: &CategorizeContext) -> Option<f64> {
    let (mut custom, mut spec) = (0usize, 0usize);
    for lot in lots.iter().filter(|l| l.built_year == Some(year)) {
        match permit_holder(lot, ctx) {
            Some((OwnerCategory::Prospects, _)) => custom += 1,
            Some((OwnerCategory::Builders, _)) => spec += 1,
            _ => {}
        }
    }
    let total = custom + spec;
    (total > 0).then(|| custom as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualObservation {
    pub year: i32,
    /// Unpermitted lots per owner category, plus cumulative permits.
    pub category_counts: StateVector,
    pub permits_issued: f64,
    pub custom_ratio: Option<f64>,
    /// Platted lots not yet sold by the developer and not permitted.
    pub unsold: f64,
}

/// Year-by-year category tallies for `first_year..=last_year`.
pub fn annual_observations(
    lots: &[LotHistory],
    first_year: i32,
    last_year: i32,
    platted: i64,
    ctx: &CategorizeContext,
) -> Result<Vec<AnnualObservation>, IngestError> {
    if first_year > last_year {
        return Err(IngestError::EmptyYearRange { first: first_year, last: last_year });
    }
    if platted < lots.len() as i64 {
        return Err(IngestError::PlattedTooSmall { platted, lots: lots.len() });
    }
    let mut out = Vec::with_capacity((last_year - first_year + 1) as usize);
    for year in first_year..=last_year {
        let mut counts = [0.0; N_STATES];
        let mut issued = 0.0;
        for lot in lots {
            if lot.is_permitted_by(year) {
                counts[OwnerCategory::Permits.index()] += 1.0;
                if lot.permit_year == Some(year) {
                    issued += 1.0;
                }
                continue;
            }
            match categorize(lot, year, ctx) {
                Ok(cat) => counts[cat.index()] += 1.0,
                Err(CategorizeError::NoOwner { .. }) => {}
                Err(e @ CategorizeError::AlreadyPermitted { .. }) => {
                    unreachable!("permitted lots handled above: {e}")
                }
            }
        }
        let assigned: f64 = counts.iter().sum();
        out.push(AnnualObservation {
            year,
            category_counts: StateVector::new(counts, year)?,
            permits_issued: issued,
            custom_ratio: custom_spec_ratio(lots, year, ctx),
            unsold: platted as f64 - assigned,
        });
    }
    Ok(out)
}

const OBSERVATION_COLUMNS: [&str; 9] =
    ["year", "flippers", "builders", "prospects", "adjacents", "permits", "unsold", "permits_issued", "custom_ratio"];

/// Writes observations as CSV. `preamble` lines are emitted as `#` comments.
pub fn write_observations<W: Write>(
    obs: &[AnnualObservation],
    preamble: &[String],
    mut sink: W,
) -> Result<(), IngestError> {
    for line in preamble {
        writeln!(sink, "# {line}").map_err(csv::Error::from)?;
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(OBSERVATION_COLUMNS)?;
    for o in obs {
        let mut rec = vec![o.year.to_string()];
        rec.extend(o.category_counts.counts.iter().map(|c| c.to_string()));
        rec.push(o.unsold.to_string());
        rec.push(o.permits_issued.to_string());
        rec.push(o.custom_ratio.map(|r| r.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_observations<R: Read>(source: R) -> Result<Vec<AnnualObservation>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(source);
    let headers = rdr.headers()?.clone();
    let missing: Vec<String> =
        OBSERVATION_COLUMNS.iter().filter(|c| !headers.iter().any(|h| h == **c)).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return Err(IngestError::Header { missing });
    }
    let idx = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |name: &str| -> Result<f64, IngestError> {
            let s = rec.get(idx(name)).unwrap_or("");
            s.parse::<f64>().map_err(|_| IngestError::Row {
                row: i + 1,
                line,
                field: name.to_string(),
                message: format!("not a number: {s:?}"),
            })
        };
        let year = num("year")? as i32;
        let counts = [num("flippers")?, num("builders")?, num("prospects")?, num("adjacents")?, num("permits")?];
        let custom_ratio = match rec.get(idx("custom_ratio")).unwrap_or("") {
            "" => None,
            _ => Some(num("custom_ratio")?),
        };
        out.push(AnnualObservation {
            year,
            category_counts: StateVector::new(counts, year)?,
            permits_issued: num("permits_issued")?,
            custom_ratio,
            unsold: num("unsold")?,
        });
    }
    Ok(out)
}
