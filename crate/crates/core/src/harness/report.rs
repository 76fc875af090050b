//! Report types and their file renderings.
//!
//! Everything except the timing files is a pure function of the config and
//! seeds, so those files are byte-identical across runs. Wall-clock timing
//! goes to `timing.csv` and `timing.json` only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{Estimator, OutputFormats};
use crate::sim::scenario::TimeWindow;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub seed: u64,
    /// Pose index in static runs, zero otherwise.
    pub index: usize,
    pub t: f64,
    pub position_error: f64,
    pub heading_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub rmse: f64,
    pub max: f64,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub mean_heading_error: f64,
}

impl Summary {
    /// Nearest-rank percentiles; an empty input gives an all-zero summary.
    pub fn of(samples: &[ErrorSample]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: 0.0,
                rmse: 0.0,
                max: 0.0,
                p50: 0.0,
                p90: 0.0,
                p95: 0.0,
                mean_heading_error: 0.0,
            };
        }
        let mut e: Vec<f64> = samples.iter().map(|s| s.position_error).collect();
        e.sort_by(f64::total_cmp);
        let rank = |p: f64| e[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            count: n,
            mean: samples.iter().map(|s| s.position_error).sum::<f64>() / n as f64,
            rmse: (samples.iter().map(|s| s.position_error.powi(2)).sum::<f64>() / n as f64).sqrt(),
            max: e[n - 1],
            p50: rank(0.5),
            p90: rank(0.9),
            p95: rank(0.95),
            mean_heading_error: samples.iter().map(|s| s.heading_error).sum::<f64>() / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub error: f64,
    pub cumulative: f64,
}

/// Empirical CDF of position errors: one row per distinct error value.
pub fn cdf(samples: &[ErrorSample]) -> Vec<CdfRow> {
    let mut e: Vec<f64> = samples.iter().map(|s| s.position_error).collect();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    let mut rows: Vec<CdfRow> = Vec::with_capacity(e.len());
    for (i, &x) in e.iter().enumerate() {
        let c = (i + 1) as f64 / n;
        match rows.last_mut() {
            Some(last) if last.error == x => last.cumulative = c,
            _ => rows.push(CdfRow { error: x, cumulative: c }),
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CycleKind {
    /// Odometry prediction only.
    Predict,
    /// A VLP or MCL measurement was processed.
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub seed: u64,
    pub t: f64,
    pub kind: CycleKind,
    pub micros: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub cycles: usize,
    pub predict_cycles: usize,
    pub update_cycles: usize,
    pub mean_micros: f64,
    pub mean_predict_micros: f64,
    pub mean_update_micros: f64,
    pub max_micros: f64,
}

impl TimingSummary {
    pub fn of(samples: &[TimingSample]) -> Self {
        let mean = |it: &mut dyn Iterator<Item = f64>| {
            let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            if n == 0 {
                0.0
            } else {
                s / n as f64
            }
        };
        let of = |k: CycleKind| samples.iter().filter(move |s| s.kind == k).map(|s| s.micros);
        Self {
            cycles: samples.len(),
            predict_cycles: of(CycleKind::Predict).count(),
            update_cycles: of(CycleKind::Update).count(),
            mean_micros: mean(&mut samples.iter().map(|s| s.micros)),
            mean_predict_micros: mean(&mut of(CycleKind::Predict)),
            mean_update_micros: mean(&mut of(CycleKind::Update)),
            max_micros: samples.iter().map(|s| s.micros).fold(0.0, f64::max),
        }
    }
}

/// Mean estimation-cycle budget, microseconds.
pub const CYCLE_BUDGET_MICROS: f64 = 10_000.0;

/// Structural timing checks: the budget holds and updates are sparse but costly.
/// Wall-clock dependent, so never part of the deterministic summary.
pub fn timing_checks(t: &TimingSummary) -> Vec<Check> {
    vec![
        Check::new(
            "timing-budget",
            t.mean_micros < CYCLE_BUDGET_MICROS,
            format!("mean cycle {:.1} µs < {CYCLE_BUDGET_MICROS} µs", t.mean_micros),
        ),
        Check::new(
            "timing-pattern",
            t.predict_cycles > t.update_cycles && t.mean_update_micros > t.mean_predict_micros,
            format!(
                "{} predict cycles at {:.1} µs, {} update cycles at {:.1} µs",
                t.predict_cycles, t.mean_predict_micros, t.update_cycles, t.mean_update_micros
            ),
        ),
    ]
}

#[derive(Serialize)]
struct TimingDoc {
    summary: TimingSummary,
    checks: Vec<Check>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub fixes: usize,
    pub fix_failures: usize,
    pub rejected_fixes: usize,
    pub rejected_mcl: usize,
    pub dropped_measurements: usize,
    pub reinitializations: usize,
    pub led_outages: Vec<TimeWindow>,
}

impl Counters {
    pub fn add(&mut self, other: &Counters) {
        self.fixes += other.fixes;
        self.fix_failures += other.fix_failures;
        self.rejected_fixes += other.rejected_fixes;
        self.rejected_mcl += other.rejected_mcl;
        self.dropped_measurements += other.dropped_measurements;
        self.reinitializations += other.reinitializations;
        for w in &other.led_outages {
            if !self.led_outages.contains(w) {
                self.led_outages.push(*w);
            }
        }
    }
}

/// A named pass/fail assertion made by a scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Per-estimator errors against ground truth, with timing and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub series: BTreeMap<Estimator, Vec<ErrorSample>>,
    pub timing: Vec<TimingSample>,
    pub counters: Counters,
    pub checks: Vec<Check>,
    /// Scenario-specific figures, already in stable order.
    pub extra: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct ErrorSummaryDoc<'a> {
    scenario: &'a str,
    seeds: &'a [u64],
    estimators: BTreeMap<&'static str, Summary>,
    counters: &'a Counters,
    extra: &'a BTreeMap<String, f64>,
    checks: &'a [Check],
}

impl ErrorReport {
    pub fn new(scenario: &str, seeds: &[u64]) -> Self {
        Self {
            scenario: scenario.into(),
            seeds: seeds.to_vec(),
            series: BTreeMap::new(),
            timing: Vec::new(),
            counters: Counters::default(),
            checks: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn summary(&self, e: Estimator) -> Option<Summary> {
        self.series.get(&e).map(|s| Summary::of(s))
    }

    pub fn cdf(&self, e: Estimator) -> Option<Vec<CdfRow>> {
        self.series.get(&e).map(|s| cdf(s))
    }

    pub fn timing_summary(&self) -> TimingSummary {
        TimingSummary::of(&self.timing)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary_json(&self) -> Result<String> {
        let doc = ErrorSummaryDoc {
            scenario: &self.scenario,
            seeds: &self.seeds,
            estimators: self.series.iter().map(|(e, s)| (e.name(), Summary::of(s))).collect(),
            counters: &self.counters,
            extra: &self.extra,
            checks: &self.checks,
        };
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }
}

#[derive(Serialize)]
struct ErrorRow<'a> {
    estimator: &'a str,
    seed: u64,
    index: usize,
    t: f64,
    position_error: f64,
    heading_error: f64,
}

#[derive(Serialize)]
struct CdfCsvRow<'a> {
    estimator: &'a str,
    error: f64,
    cumulative: f64,
}

/// Files written for one report, in write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Emitted {
    pub files: Vec<PathBuf>,
    /// Wall-clock dependent; excluded from reproducibility comparisons.
    pub timing_files: Vec<PathBuf>,
}

pub(crate) fn csv_file<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn text_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `errors.csv`, `cdf.csv`, `summary.json` and the timing files under `dir`.
pub fn emit_error_report(report: &ErrorReport, formats: &OutputFormats, dir: &Path) -> Result<Emitted> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Emitted::default();
    if formats.csv {
        let p = dir.join("errors.csv");
        csv_file(
            &p,
            report.series.iter().flat_map(|(e, s)| {
                s.iter().map(move |x| ErrorRow {
                    estimator: e.name(),
                    seed: x.seed,
                    index: x.index,
                    t: x.t,
                    position_error: x.position_error,
                    heading_error: x.heading_error,
                })
            }),
        )?;
        out.files.push(p);
        let p = dir.join("cdf.csv");
        csv_file(
            &p,
            report.series.iter().flat_map(|(e, s)| {
                cdf(s).into_iter().map(move |r| CdfCsvRow {
                    estimator: e.name(),
                    error: r.error,
                    cumulative: r.cumulative,
                })
            }),
        )?;
        out.files.push(p);
        if !report.timing.is_empty() {
            let p = dir.join("timing.csv");
            csv_file(&p, report.timing.iter())?;
            out.timing_files.push(p);
        }
    }
    if formats.json {
        let p = dir.join("summary.json");
        text_file(&p, &report.summary_json()?)?;
        out.files.push(p);
        if !report.timing.is_empty() {
            let p = dir.join("timing.json");
            let summary = report.timing_summary();
            let doc = TimingDoc {
                summary,
                checks: timing_checks(&summary),
            };
            text_file(&p, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
            out.timing_files.push(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(errs: &[f64]) -> Vec<ErrorSample> {
        errs.iter()
            .enumerate()
            .map(|(i, &e)| ErrorSample {
                seed: 1,
                index: i,
                t: i as f64,
                position_error: e,
                heading_error: e / 10.0,
            })
            .collect()
    }

    #[test]
    fn summary_oracle() {
        let s = Summary::of(&samples(&[0.04, 0.01, 0.03, 0.02]));
        assert_eq!(s.count, 4);
        assert!((s.mean - 0.025).abs() < 1e-15);
        assert_eq!(s.max, 0.04);
        assert_eq!(s.p50, 0.02);
        assert_eq!(s.p90, 0.04);
        assert!((s.rmse - (0.003f64 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[]).count, 0);
    }

    #[test]
    fn cdf_merges_ties() {
        let rows = cdf(&samples(&[0.2, 0.1, 0.2, 0.3]));
        assert_eq!(
            rows,
            vec![
                CdfRow { error: 0.1, cumulative: 0.25 },
                CdfRow { error: 0.2, cumulative: 0.75 },
                CdfRow { error: 0.3, cumulative: 1.0 },
            ]
        );
    }

    proptest! {
        #[test]
        fn cdf_is_monotone_and_ends_at_one(errs in prop::collection::vec(0.0f64..5.0, 1..200)) {
            let s = samples(&errs);
            let rows = cdf(&s);
            prop_assert!(rows.windows(2).all(|w| w[0].error < w[1].error && w[0].cumulative < w[1].cumulative));
            prop_assert_eq!(rows.last().unwrap().cumulative, 1.0);
            let sum = Summary::of(&s);
            prop_assert!(sum.mean <= sum.max);
            prop_assert!(sum.p50 <= sum.p90 && sum.p90 <= sum.p95 && sum.p95 <= sum.max);
        }
    }

    #[test]
    fn emission_is_stable_and_consistent() {
        let mut r = ErrorReport::new("unit", &[1]);
        r.series.insert(Estimator::Mcl, samples(&[0.07, 0.05, 0.09]));
        r.series.insert(Estimator::Fused, samples(&[0.01, 0.02, 0.015]));
        r.checks.push(Check::new("ok", true, ""));
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ea = emit_error_report(&r, &OutputFormats::default(), a.path()).unwrap();
        emit_error_report(&r, &OutputFormats::default(), b.path()).unwrap();
        for f in &ea.files {
            let name = f.file_name().unwrap();
            assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        // Mean recomputed from the table matches the summary document.
        let mut rd = csv::Reader::from_path(a.path().join("errors.csv")).unwrap();
        let fused: Vec<f64> = rd
            .records()
            .map(|r| r.unwrap())
            .filter(|r| &r[0] == "fused")
            .map(|r| r[4].parse().unwrap())
            .collect();
        let mean = fused.iter().sum::<f64>() / fused.len() as f64;
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(doc["estimators"]["fused"]["mean"].as_f64().unwrap(), mean);
        let cdf_text = std::fs::read_to_string(a.path().join("cdf.csv")).unwrap();
        assert!(cdf_text.lines().last().unwrap().ends_with(",1.0"));
    }
}
