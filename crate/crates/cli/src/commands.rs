//! Subcommand implementations. Each reads files, writes files into the output
//! directory and returns the paths it wrote.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use buildout_core::bayes::{expected_category_permits, expected_total_permits, fit_pmf, held_lot, HeldLot};
use buildout_core::estimation::{estimate_sequence, one_hop_bounds, ConstraintScenario, EstimationResult};
use buildout_core::forecast::{forecast_from_history, ForecastSeries, ForecastSettings, NormalizeWarning, Phase};
use buildout_core::ingestion::{
    annual_observations, parse_transactions, read_observations, write_observations, write_transactions,
    AnnualObservation, CategorizeContext, LotHistory,
};
use buildout_core::model::{OwnerCategory, TransitionMatrix};
use buildout_core::regime::{regime_report, write_cusum_csv, FeatureVectorSeries, RegimeReport};
use buildout_core::synth::{simulate_with, Truth};
use buildout_core::Execution;
use chrono::Datelike;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Failure, Kind};

pub struct Run {
    pub config: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    pub exec: Execution,
}

/// Provenance fields shared by every JSON output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatricesFile {
    #[serde(flatten)]
    pub header: Header,
    pub matrices: Vec<TransitionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastFile {
    #[serde(flatten)]
    pub header: Header,
    pub platted: f64,
    pub settings: ForecastSettings,
    pub series: ForecastSeries,
    pub warnings: Vec<NormalizeWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimesFile {
    #[serde(flatten)]
    pub header: Header,
    #[serde(flatten)]
    pub report: RegimeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub header: Header,
    pub last_observed_year: i32,
    pub last_observed_permits: f64,
    pub next_year: i32,
    pub next_year_permits: f64,
    pub next_year_permits_ci: Option<(f64, f64)>,
    /// Percent change of next year's permits over the last observed year;
    /// absent when no permits were observed.
    pub next_year_change_pct: Option<f64>,
    pub next_year_change_pct_ci: Option<(f64, f64)>,
    pub horizon_end_year: i32,
    pub horizon_end_buildout_pct: f64,
    pub horizon_end_buildout_pct_ci: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regimes: Option<RegimeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub chosen_k: usize,
    pub changepoints: Vec<i32>,
}

impl Run {
    pub fn header(&self) -> Header {
        Header { config_sha256: self.hash.clone(), seed: self.config.seed }
    }

    fn preamble(&self) -> Vec<String> {
        vec![format!("config_sha256: {}", self.hash), format!("seed: {}", self.config.seed)]
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(&self.out).map_err(|e| Failure::io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, bytes).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::new(Kind::Io, e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn write_csv(&self, name: &str, rows: &[Vec<String>]) -> Result<PathBuf, Failure> {
        let mut buf = Vec::new();
        for line in self.preamble() {
            buf.extend_from_slice(format!("# {line}\n").as_bytes());
        }
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.write_record(r).map_err(|e| Failure::new(Kind::Io, e.to_string()))?;
        }
        w.flush().map_err(|e| Failure::new(Kind::Io, e.to_string()))?;
        drop(w);
        self.write(name, &buf)
    }

    fn context(&self, lots: &[LotHistory]) -> CategorizeContext {
        CategorizeContext::new(lots, self.config.categorize)
    }

    pub fn ingest(&self, transactions: &Path) -> Result<Vec<PathBuf>, Failure> {
        let lots = load_transactions(transactions)?;
        let obs = self.observations(&lots)?;
        let mut buf = Vec::new();
        write_observations(&obs, &self.preamble(), &mut buf)?;
        Ok(vec![self.write("observations.csv", &buf)?])
    }

    fn observations(&self, lots: &[LotHistory]) -> Result<Vec<AnnualObservation>, Failure> {
        let (first, last) = self.year_range(lots)?;
        let platted = self.config.platted.unwrap_or(lots.len() as i64);
        Ok(annual_observations(lots, first, last, platted, &self.context(lots))?)
    }

    fn year_range(&self, lots: &[LotHistory]) -> Result<(i32, i32), Failure> {
        let (first, last) = match (self.config.first_year, self.config.last_year) {
            (Some(f), Some(l)) => (f, l),
            (f, l) => {
                let (df, dl) = data_years(lots).ok_or_else(|| Failure::new(Kind::Input, "no transactions"))?;
                (f.unwrap_or(df), l.unwrap_or(dl))
            }
        };
        if first > last {
            return Err(Failure::new(Kind::Input, format!("empty year range {first}..={last}")));
        }
        Ok((first, last))
    }

    /// The scenario file plus one-hop bounds, relaxed if asked.
    fn scenario(&self, transactions: Option<&Path>, obs: &[AnnualObservation]) -> Result<ConstraintScenario, Failure> {
        let mut scenario = self.config.scenario()?;
        if let Some(hop) = &self.config.one_hop {
            let path = transactions.ok_or_else(|| Failure::new(Kind::Config, "one_hop bounds need --transactions"))?;
            let lots = load_transactions(path)?;
            let ranges = if hop.ranges.is_empty() {
                let first = obs.first().map(|o| o.year).unwrap_or(0);
                let last = obs.last().map(|o| o.year).unwrap_or(0);
                vec![(first, last - 1)]
            } else {
                hop.ranges.clone()
            };
            let derived = one_hop_bounds(&lots, &self.context(&lots), &ranges, hop.z, hop.min_halfwidth);
            // Bounds from the scenario file take precedence.
            let extra: Vec<_> = derived
                .into_iter()
                .filter(|d| {
                    !scenario.bounds.iter().any(|b| {
                        b.transition() == d.transition() && b.year_start <= d.year_end && d.year_start <= b.year_end
                    })
                })
                .collect();
            scenario.bounds.extend(extra);
        }
        if let Some(factor) = self.config.relax {
            if !(factor.is_finite() && factor >= 1.0) {
                return Err(Failure::new(Kind::Config, format!("relax factor must be >= 1, got {factor}")));
            }
            scenario = scenario.relaxed(factor);
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn estimate(&self, observations: &Path, transactions: Option<&Path>) -> Result<Vec<PathBuf>, Failure> {
        let obs = load_observations(observations)?;
        let est = self.fit(&obs, transactions)?;
        self.write_estimates(&est)
    }

    fn fit(&self, obs: &[AnnualObservation], transactions: Option<&Path>) -> Result<EstimationResult, Failure> {
        let scenario = self.scenario(transactions, obs)?;
        Ok(estimate_sequence(obs, &scenario)?)
    }

    fn write_estimates(&self, est: &EstimationResult) -> Result<Vec<PathBuf>, Failure> {
        let matrices = MatricesFile { header: self.header(), matrices: est.matrices.clone() };
        let mut rows = vec![vec!["year".into(), "residual".into(), "objective".into(), "active".into()]];
        for (i, m) in est.matrices.iter().enumerate() {
            let active: Vec<String> = est.active_constraints[i]
                .iter()
                .map(|a| format!("{}:{}", a.transition.label(), side_name(a.side)))
                .collect();
            rows.push(vec![
                m.year().to_string(),
                est.residuals[i].to_string(),
                est.objectives[i].to_string(),
                active.join(";"),
            ]);
        }
        Ok(vec![self.write_json("matrices.json", &matrices)?, self.write_csv("residuals.csv", &rows)?])
    }

    pub fn forecast(&self, observations: &Path, matrices: &Path) -> Result<Vec<PathBuf>, Failure> {
        let obs = load_observations(observations)?;
        let file: MatricesFile = load_json(matrices)?;
        self.run_forecast(&obs, &file.matrices).map(|(paths, _)| paths)
    }

    fn run_forecast(
        &self,
        obs: &[AnnualObservation],
        matrices: &[TransitionMatrix],
    ) -> Result<(Vec<PathBuf>, ForecastFile), Failure> {
        let platted = self.platted_for(obs)?;
        let settings = &self.config.forecast;
        let run = forecast_from_history(obs, matrices, settings, platted, self.exec)?;
        for w in &run.warnings {
            eprintln!("warning: year {} row {}: {}", w.year, w.row, w.message);
        }
        let mut csv = Vec::new();
        run.series.write_csv(&self.preamble(), &mut csv)?;
        let file = ForecastFile {
            header: self.header(),
            platted,
            settings: settings.clone(),
            series: run.series,
            warnings: run.warnings,
        };
        let matrices = MatricesFile { header: self.header(), matrices: run.matrices };
        let paths = vec![
            self.write("forecast.csv", &csv)?,
            self.write_json("forecast.json", &file)?,
            self.write_json("forecast_matrices.json", &matrices)?,
        ];
        Ok((paths, file))
    }

    /// Platted lots from the config, else the lots accounted for in the last
    /// observation.
    fn platted_for(&self, obs: &[AnnualObservation]) -> Result<f64, Failure> {
        if let Some(p) = self.config.platted {
            return Ok(p as f64);
        }
        let last = obs.last().ok_or_else(|| Failure::new(Kind::Input, "no observations"))?;
        Ok(last.category_counts.total() + last.unsold)
    }

    pub fn regimes(&self, matrices: &Path) -> Result<Vec<PathBuf>, Failure> {
        let file: MatricesFile = load_json(matrices)?;
        self.run_regimes(&file.matrices).map(|(paths, _)| paths)
    }

    fn run_regimes(&self, matrices: &[TransitionMatrix]) -> Result<(Vec<PathBuf>, RegimeReport), Failure> {
        let series = FeatureVectorSeries::from_matrices(matrices)?;
        let report = regime_report(&series, &self.config.regimes, self.exec)?;
        let mut cusum = Vec::new();
        for line in self.preamble() {
            cusum.extend_from_slice(format!("# {line}\n").as_bytes());
        }
        write_cusum_csv(&series, &mut cusum)?;
        let file = RegimesFile { header: self.header(), report: report.clone() };
        let paths = vec![self.write_json("regimes.json", &file)?, self.write("cusum.csv", &cusum)?];
        Ok((paths, report))
    }

    pub fn bayes(&self, transactions: &Path) -> Result<Vec<PathBuf>, Failure> {
        let lots = load_transactions(transactions)?;
        let ctx = self.context(&lots);
        let as_of = match self.config.bayes.as_of_year {
            Some(y) => y,
            None => data_years(&lots).ok_or_else(|| Failure::new(Kind::Input, "no transactions"))?.1,
        };
        let horizon = self.config.bayes.horizon;
        let held: Vec<HeldLot> = lots.iter().filter_map(|l| held_lot(l, &ctx, as_of)).collect();

        let mut paths = Vec::new();
        let mut per_category = Vec::new();
        for cat in OwnerCategory::OWNERS {
            if !cat.can_permit() {
                eprintln!("warning: {cat} never permit directly; fitting their time-to-permit pmf anyway");
            }
            let lots_in: Vec<HeldLot> = held.iter().copied().filter(|h| h.category == cat).collect();
            match fit_pmf(&lots, cat, &ctx, as_of) {
                Ok(pmf) => {
                    let mut buf = Vec::new();
                    pmf.write_json(&mut buf)?;
                    let name = format!("pmf_{}.json", cat.to_string().to_lowercase());
                    paths.push(self.write(&name, &buf)?);
                    per_category.push(expected_category_permits(&pmf, &lots_in, horizon)?);
                }
                Err(e) => {
                    eprintln!("warning: {e}; expecting no permits from {} held lot(s)", lots_in.len());
                    per_category.push(vec![0.0; horizon as usize]);
                }
            }
        }
        let total = expected_total_permits(&per_category)?;
        let mut rows = vec![vec![
            "year".to_string(),
            "flippers".into(),
            "builders".into(),
            "prospects".into(),
            "adjacents".into(),
            "total".into(),
        ]];
        for t in 0..horizon as usize {
            let mut r = vec![(as_of + 1 + t as i32).to_string()];
            r.extend(per_category.iter().map(|c| c[t].to_string()));
            r.push(total[t].to_string());
            rows.push(r);
        }
        paths.push(self.write_csv("expected_permits.csv", &rows)?);
        Ok(paths)
    }

    pub fn synth(&self) -> Result<Vec<PathBuf>, Failure> {
        let opts =
            self.config.synth.as_ref().ok_or_else(|| Failure::new(Kind::Config, "config has no `synth` section"))?;
        let spec = opts.spec(self.config.seed);
        let out = simulate_with(&spec, opts.years, self.exec)?;
        let mut buf = Vec::new();
        for line in self.preamble() {
            buf.extend_from_slice(format!("# {line}\n").as_bytes());
        }
        write_transactions(&out.lots, &mut buf)?;
        let truth = TruthFile { header: self.header(), truth: Truth::new(&spec, opts.years, &out) };
        Ok(vec![self.write("transactions.csv", &buf)?, self.write_json("truth.json", &truth)?])
    }

    /// Headline numbers from an existing forecast.json.
    pub fn report_from(&self, forecast: &Path, regimes: Option<&Path>) -> Result<Vec<PathBuf>, Failure> {
        let file: ForecastFile = load_json(forecast)?;
        let summary = match regimes {
            Some(p) => {
                let r: RegimesFile = load_json(p)?;
                Some(RegimeSummary { chosen_k: r.report.chosen_k, changepoints: r.report.changepoints })
            }
            None => None,
        };
        let report = self.summarize(&file.series, summary)?;
        Ok(vec![self.write_json("report.json", &report)?])
    }

    /// The whole chain from a transactions file, writing every intermediate.
    pub fn report_pipeline(&self, transactions: &Path) -> Result<Vec<PathBuf>, Failure> {
        let lots = load_transactions(transactions)?;
        let obs = self.observations(&lots)?;
        let mut buf = Vec::new();
        write_observations(&obs, &self.preamble(), &mut buf)?;
        let mut paths = vec![self.write("observations.csv", &buf)?];
        let est = self.fit(&obs, Some(transactions))?;
        paths.extend(self.write_estimates(&est)?);
        let (fpaths, forecast) = self.run_forecast(&obs, &est.matrices)?;
        paths.extend(fpaths);
        let summary = match self.run_regimes(&est.matrices) {
            Ok((rpaths, r)) => {
                paths.extend(rpaths);
                Some(RegimeSummary { chosen_k: r.chosen_k, changepoints: r.changepoints })
            }
            Err(e) => {
                eprintln!("warning: regime detection skipped: {e}");
                None
            }
        };
        let report = self.summarize(&forecast.series, summary)?;
        paths.push(self.write_json("report.json", &report)?);
        Ok(paths)
    }

    fn summarize(&self, series: &ForecastSeries, regimes: Option<RegimeSummary>) -> Result<Report, Failure> {
        let last = series
            .rows
            .iter()
            .rfind(|r| r.phase == Phase::Historical)
            .ok_or_else(|| Failure::new(Kind::Input, "forecast has no observed years"))?;
        let mut ahead = series.forecast_rows();
        let next = ahead.next().ok_or_else(|| Failure::new(Kind::Input, "forecast has no forecast years"))?;
        let end = series.forecast_rows().last().unwrap_or(next);
        let base = last.permits;
        let change = |v: f64| (base > 0.0).then(|| 100.0 * (v - base) / base);
        let band = |b: Option<buildout_core::forecast::Band>| b.map(|b| (b.low, b.high));
        Ok(Report {
            header: self.header(),
            last_observed_year: last.year,
            last_observed_permits: base,
            next_year: next.year,
            next_year_permits: next.permits,
            next_year_permits_ci: band(next.permits_ci),
            next_year_change_pct: change(next.permits),
            next_year_change_pct_ci: next.permits_ci.and_then(|b| Some((change(b.low)?, change(b.high)?))),
            horizon_end_year: end.year,
            horizon_end_buildout_pct: 100.0 * end.buildout,
            horizon_end_buildout_pct_ci: end.buildout_ci.map(|b| (100.0 * b.low, 100.0 * b.high)),
            regimes,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    #[serde(flatten)]
    pub header: Header,
    #[serde(flatten)]
    pub truth: Truth,
}

fn side_name(side: buildout_core::estimation::BoundSide) -> &'static str {
    use buildout_core::estimation::BoundSide::*;
    match side {
        Lower => "lower",
        Upper => "upper",
        Pinned => "pinned",
    }
}

/// First year in which every lot has an owner, and the last year with a
/// sale or permit on a lot that was still unpermitted.
pub fn data_years(lots: &[LotHistory]) -> Option<(i32, i32)> {
    let first = lots.iter().filter_map(|l| l.transactions.first()).map(|t| t.date.year()).max()?;
    let last = lots
        .iter()
        .flat_map(|l| {
            let sales = l.transactions.iter().map(|t| t.date.year()).filter(|&y| l.permit_year.is_none_or(|p| y <= p));
            sales.chain(l.permit_year)
        })
        .max()?;
    Some((first, last.max(first)))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| Failure::io(path, e))
}

pub fn load_transactions(path: &Path) -> Result<Vec<LotHistory>, Failure> {
    let parsed = parse_transactions(open(path)?).map_err(|e| Failure::from(e).at(path))?;
    for w in &parsed.warnings {
        eprintln!("warning: {}: row {}: {}", path.display(), w.row, w.message);
    }
    Ok(parsed.lots)
}

fn load_observations(path: &Path) -> Result<Vec<AnnualObservation>, Failure> {
    read_observations(open(path)?).map_err(|e| Failure::from(e).at(path))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_reader(open(path)?).map_err(|e| Failure::new(Kind::Input, e.to_string()).at(path))
}
