use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const REFERENCE_P: [f64; 14] = [0.06, 0.08, 0.03, 0.05, 0.04, 0.02, 0.30, 0.02, 0.03, 0.02, 0.12, 0.04, 0.03, 0.05];
const FREE: [(usize, usize); 14] =
    [(0, 1), (0, 2), (0, 3), (1, 0), (1, 2), (1, 3), (1, 4), (2, 0), (2, 1), (2, 3), (2, 4), (3, 0), (3, 1), (3, 2)];

fn reference_matrix() -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; 5]; 5];
    for (&(i, j), &p) in FREE.iter().zip(&REFERENCE_P) {
        m[i][j] = p;
    }
    for (i, row) in m.iter_mut().enumerate().take(4) {
        row[i] = 1.0 - row.iter().sum::<f64>();
    }
    m[4][4] = 1.0;
    m
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(extra: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = json!({
            "seed": 11,
            "synth": {
                "years": 10,
                "platted": 2000,
                "initial": [400, 300, 700, 200, 400],
                "first_year": 2000,
                "matrix": reference_matrix(),
            },
            "forecast": {"mc_runs": 50},
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        fs::write(dir.path().join("config.json"), cfg.to_string()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_buildout"))
            .arg("--config")
            .arg(self.path("config.json"))
            .arg("--out")
            .arg(self.path(out))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) {
        let o = self.run(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    /// synth, ingest and estimate into `out`.
    fn fit(&self, out: &str, estimate_flags: &[&str]) {
        self.ok(out, &["synth"]);
        let tx = self.arg(&format!("{out}/transactions.csv"));
        self.ok(out, &["ingest", "--transactions", &tx]);
        let obs = self.arg(&format!("{out}/observations.csv"));
        let mut args = vec!["estimate", "--observations", obs.as_str()];
        args.extend_from_slice(estimate_flags);
        self.ok(out, &args);
    }
}

fn data_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_ingest_estimate_fits_the_counts() {
    let ws = Workspace::new(json!({}));
    fs::write(ws.path("scenario.json"), r#"{"lambda": 0.001}"#).unwrap();
    let scenario = ws.arg("scenario.json");
    ws.fit("run", &["--scenario", &scenario]);

    let rows = data_rows(&ws.path("run/residuals.csv"));
    assert_eq!(rows[0], ["year", "residual", "objective", "active"]);
    assert_eq!(rows.len(), 11);
    for r in &rows[1..] {
        let residual: f64 = r[1].parse().unwrap();
        assert!(residual <= 2e-3, "year {}: residual {residual}", r[0]);
    }

    let obs = data_rows(&ws.path("run/observations.csv"));
    let truth = read_json(&ws.path("run/truth.json"));
    for (row, t) in obs[1..].iter().zip(truth["observations"].as_array().unwrap()) {
        let counts: Vec<f64> = row[1..6].iter().map(|v| v.parse().unwrap()).collect();
        let expected: Vec<f64> =
            t["category_counts"]["counts"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(counts, expected, "year {}", row[0]);
    }

    let m = read_json(&ws.path("run/matrices.json"));
    assert_eq!(m["seed"], 11);
    assert_eq!(m["matrices"].as_array().unwrap().len(), 10);
}

#[test]
fn forecast_without_monte_carlo_has_no_interval_columns() {
    let ws = Workspace::new(json!({}));
    ws.fit("run", &[]);
    let obs = ws.arg("run/observations.csv");
    let mats = ws.arg("run/matrices.json");
    ws.ok("run", &["forecast", "--observations", &obs, "--matrices", &mats, "--mc-runs", "0"]);
    let rows = data_rows(&ws.path("run/forecast.csv"));
    assert_eq!(rows[0], ["year", "phase", "permits", "buildout"]);
    assert!(rows[1..].iter().all(|r| r.len() == 4));

    ws.ok("run", &["forecast", "--observations", &obs, "--matrices", &mats]);
    let rows = data_rows(&ws.path("run/forecast.csv"));
    assert_eq!(
        rows[0],
        ["year", "phase", "permits", "permits_lo", "permits_hi", "buildout", "buildout_lo", "buildout_hi"]
    );
    let forecast: Vec<_> = rows[1..].iter().filter(|r| r[1] == "forecast").collect();
    assert_eq!(forecast.len(), 7);
    for r in forecast {
        let v: Vec<f64> = [2, 3, 4, 5, 6, 7].iter().map(|&i| r[i].parse().unwrap()).collect();
        assert!(v[1] <= v[0] && v[0] <= v[2]);
        assert!(v[4] <= v[3] && v[3] <= v[5]);
    }
}

#[test]
fn every_output_is_byte_identical_on_rerun() {
    let ws = Workspace::new(json!({"one_hop": {"z": 2.0}}));
    let run = |out: &str, extra: &[&str]| {
        let tx = ws.arg("src/transactions.csv");
        let mut args: Vec<&str> = extra.to_vec();
        args.extend(["report", "--transactions", &tx]);
        ws.ok(out, &args);
        let bargs: Vec<&str> = extra.iter().copied().chain(["bayes", "--transactions", &tx]).collect();
        ws.ok(out, &bargs);
    };
    ws.ok("src", &["synth"]);
    run("a", &[]);
    run("b", &[]);
    run("c", &["--sequential"]);

    let mut names: Vec<_> = fs::read_dir(ws.path("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for expected in [
        "observations.csv",
        "matrices.json",
        "residuals.csv",
        "forecast.csv",
        "forecast.json",
        "forecast_matrices.json",
        "regimes.json",
        "cusum.csv",
        "report.json",
        "expected_permits.csv",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    for name in &names {
        let a = fs::read(ws.path("a").join(name)).unwrap();
        assert_eq!(a, fs::read(ws.path("b").join(name)).unwrap(), "{name:?} differs between runs");
        assert_eq!(a, fs::read(ws.path("c").join(name)).unwrap(), "{name:?} differs when sequential");
    }
}

#[test]
fn outputs_record_config_hash_and_seed() {
    let ws = Workspace::new(json!({}));
    ws.fit("a", &[]);
    let hash = read_json(&ws.path("a/matrices.json"))["config_sha256"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for csv in ["observations.csv", "residuals.csv"] {
        let text = fs::read_to_string(ws.path("a").join(csv)).unwrap();
        assert!(text.starts_with(&format!("# config_sha256: {hash}\n# seed: 11\n")), "{csv}");
    }
    let truth = read_json(&ws.path("a/truth.json"));
    assert_eq!(truth["config_sha256"], hash.as_str());

    ws.ok("b", &["--seed", "12", "synth"]);
    let other = read_json(&ws.path("b/truth.json"));
    assert_eq!(other["seed"], 12);
    assert_ne!(other["config_sha256"], hash.as_str());
    assert_ne!(fs::read(ws.path("a/transactions.csv")).unwrap(), fs::read(ws.path("b/transactions.csv")).unwrap());
}

#[test]
fn report_reads_forecast_outputs() {
    let ws = Workspace::new(json!({}));
    ws.fit("run", &[]);
    let obs = ws.arg("run/observations.csv");
    let mats = ws.arg("run/matrices.json");
    ws.ok("run", &["forecast", "--observations", &obs, "--matrices", &mats, "--horizon", "3"]);
    ws.ok("run", &["regimes", "--matrices", &mats]);
    let f = ws.arg("run/forecast.json");
    let r = ws.arg("run/regimes.json");
    ws.ok("run", &["report", "--forecast-json", &f, "--regimes-json", &r]);
    let report = read_json(&ws.path("run/report.json"));
    assert_eq!(report["last_observed_year"], 2010);
    assert_eq!(report["next_year"], 2011);
    assert_eq!(report["horizon_end_year"], 2013);
    let last = report["last_observed_permits"].as_f64().unwrap();
    let next = report["next_year_permits"].as_f64().unwrap();
    let change = report["next_year_change_pct"].as_f64().unwrap();
    assert!((change - 100.0 * (next - last) / last).abs() < 1e-9);
    let b = report["horizon_end_buildout_pct"].as_f64().unwrap();
    let ci = report["horizon_end_buildout_pct_ci"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= b && b <= ci[1].as_f64().unwrap());
    assert!(report["regimes"]["chosen_k"].as_u64().unwrap() >= 1);
}

#[test]
fn failures_are_json_records_with_distinct_exit_codes() {
    let ws = Workspace::new(json!({}));
    let record = |o: &Output| -> Value { serde_json::from_slice(o.stderr.trim_ascii()).unwrap() };

    let missing = ws.arg("missing.csv");
    let o = ws.run("run", &["ingest", "--transactions", &missing]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(record(&o)["error"]["kind"], "io");

    fs::write(ws.path("bad.csv"), "lot_id,date\nL1,2000-01-01\n").unwrap();
    let bad = ws.arg("bad.csv");
    let o = ws.run("run", &["ingest", "--transactions", &bad]);
    assert_eq!(o.status.code(), Some(4));
    let msg = record(&o)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("buyer_id"), "{msg}");

    ws.fit("run", &[]);
    fs::write(
        ws.path("tight.json"),
        json!({"bounds": [
            {"from": "B", "to": "F", "year_start": 2000, "year_end": 2003, "lo": 0.6, "hi": 0.7},
            {"from": "B", "to": "R", "year_start": 2000, "year_end": 2003, "lo": 0.5, "hi": 0.6},
        ]})
        .to_string(),
    )
    .unwrap();
    let obs = ws.arg("run/observations.csv");
    let tight = ws.arg("tight.json");
    let o = ws.run("run", &["estimate", "--observations", &obs, "--scenario", &tight]);
    assert_eq!(o.status.code(), Some(5), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(record(&o)["error"]["kind"], "infeasible");

    fs::write(ws.path("config.json"), r#"{"sed": 3}"#).unwrap();
    let o = ws.run("run", &["synth"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(record(&o)["error"]["kind"], "config");
}
