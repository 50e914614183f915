//! Experiment orchestration: table runs, t/a sweeps, identity verification
//! and report emission.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{a_optimal, t_max, EstimatorSpec, EstimatorTemplate};
use crate::haff::{konno_g, verify_identity, HaffOperatorConfig, IdentityReport};
use crate::numfmt::format_g;
use crate::risk::{simulate_losses, LossKind, Pairing, RiskReport, ScenarioSummary};
use crate::sampling::{Scenario, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("unknown output format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub format: OutputFormat,
}

/// Worker threads for the replication loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Workers {
    #[default]
    #[serde(with = "auto_literal")]
    Auto,
    Count(usize),
}

mod auto_literal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"auto\", got {s:?}")))
        }
    }
}

impl Workers {
    pub fn resolve(self) -> usize {
        match self {
            Workers::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()),
            Workers::Count(n) => n.max(1),
        }
    }
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: Workers, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.resolve())
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn default_losses() -> Vec<LossKind> {
    vec![LossKind::DataBased]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenarios: Vec<ScenarioConfig>,
    /// Estimator strings; the first `usual` entry is the PRIAL baseline.
    pub estimators: Vec<String>,
    #[serde(default = "default_losses")]
    pub losses: Vec<LossKind>,
    pub reps: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
    #[serde(default)]
    pub workers: Workers,
    #[serde(default)]
    pub pairing: Pairing,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators".into()));
        }
        if self.losses.is_empty() {
            return Err(Error::Config("no losses".into()));
        }
        if self.reps < 2 {
            return Err(Error::Config(format!("reps must be at least 2, got {}", self.reps)));
        }
        for e in &self.estimators {
            e.parse::<EstimatorTemplate>()?;
        }
        Ok(())
    }

    fn templates(&self) -> Result<Vec<EstimatorTemplate>> {
        self.estimators.iter().map(|e| e.parse()).collect()
    }
}

/// A scenario whose replications could not be completed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowFailure {
    pub scenario: ScenarioSummary,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct TableOutcome {
    pub rows: Vec<RiskReport>,
    pub failures: Vec<RowFailure>,
}

/// Runs every scenario × estimator × loss cell, on the caller's thread pool.
///
/// All cells of a scenario share one replication stream keyed by
/// `master_seed` (unless the config asks for unpaired sampling). Scenarios
/// hitting a numerical failure are reported in `failures`; configuration
/// problems abort the whole run.
pub fn run_table(cfg: &ExperimentConfig) -> Result<TableOutcome> {
    cfg.validate()?;
    let templates = cfg.templates()?;
    let baseline = templates
        .iter()
        .position(|t| matches!(t, EstimatorTemplate::Usual { .. }));
    let mut outcome = TableOutcome::default();
    for sc_cfg in &cfg.scenarios {
        let sc = sc_cfg.build().map_err(|e| match e {
            Error::Io { .. } | Error::Config(_) => e,
            other => Error::Config(format!("scenario {sc_cfg:?}: {other}")),
        })?;
        let specs = templates
            .iter()
            .map(|t| t.resolve(&sc))
            .collect::<Result<Vec<EstimatorSpec>>>()?;
        match scenario_rows(&sc, &specs, baseline, cfg) {
            Ok(rows) => outcome.rows.extend(rows),
            Err(e) if e.is_numerical() => outcome.failures.push(RowFailure {
                scenario: (&sc).into(),
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(outcome)
}

fn scenario_rows(
    sc: &Scenario,
    specs: &[EstimatorSpec],
    baseline: Option<usize>,
    cfg: &ExperimentConfig,
) -> Result<Vec<RiskReport>> {
    let table = simulate_losses(sc, specs, &cfg.losses, cfg.reps, cfg.master_seed, cfg.pairing)?;
    let mut rows = Vec::with_capacity(specs.len() * cfg.losses.len());
    for l in 0..cfg.losses.len() {
        for j in 0..specs.len() {
            let mut row = RiskReport::from_table(sc, &table, specs, j, l, cfg.master_seed);
            if let Some(b) = baseline.filter(|&b| b != j) {
                row.prial = table.prial(b, j, l).ok().map(|p| p.prial);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Flat output record shared by the CSV and JSON emitters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub p: usize,
    pub m: usize,
    pub q: usize,
    pub family: String,
    pub rho: Option<f64>,
    pub loss: String,
    pub estimator: String,
    pub reps: usize,
    pub seed: u64,
    pub avg_loss: f64,
    pub std_err: f64,
    pub prial: Option<f64>,
}

fn round_sig(x: f64, sig: usize) -> f64 {
    format_g(x, sig).parse().unwrap_or(x)
}

fn round_decimals(x: f64, decimals: usize) -> f64 {
    format!("{x:.decimals$}").parse().unwrap_or(x)
}

impl From<&RiskReport> for ReportRow {
    fn from(r: &RiskReport) -> Self {
        Self {
            p: r.scenario.p,
            m: r.scenario.m,
            q: r.scenario.q,
            family: r.scenario.family.clone(),
            rho: r.scenario.rho,
            loss: r.loss.name().to_string(),
            estimator: r.estimator.label.clone(),
            reps: r.reps,
            seed: r.seed,
            avg_loss: round_sig(r.avg_loss, 6),
            std_err: round_sig(r.std_err, 6),
            prial: r.prial.map(|p| round_decimals(p, 2)),
        }
    }
}

pub const REPORT_HEADER: [&str; 12] = [
    "p", "m", "q", "family", "rho", "loss", "estimator", "reps", "seed", "avg_loss", "std_err", "prial",
];

/// CSV with losses at 6 significant digits and PRIAL at 2 decimals.
pub fn write_reports_csv<W: Write>(out: W, rows: &[RiskReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([
            r.scenario.p.to_string(),
            r.scenario.m.to_string(),
            r.scenario.q.to_string(),
            r.scenario.family.clone(),
            r.scenario.rho.map(|x| x.to_string()).unwrap_or_default(),
            r.loss.name().to_string(),
            r.estimator.label.clone(),
            r.reps.to_string(),
            r.seed.to_string(),
            format_g(r.avg_loss, 6),
            format_g(r.std_err, 6),
            r.prial.map(|p| format!("{p:.2}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_reports_json<W: Write>(mut out: W, rows: &[RiskReport]) -> Result<()> {
    let flat: Vec<ReportRow> = rows.iter().map(ReportRow::from).collect();
    serde_json::to_writer_pretty(&mut out, &flat)?;
    writeln!(out).map_err(|e| Error::io("<json>", e))?;
    Ok(())
}

pub fn write_reports<W: Write>(out: W, format: OutputFormat, rows: &[RiskReport]) -> Result<()> {
    match format {
        OutputFormat::Csv => write_reports_csv(out, rows),
        OutputFormat::Json => write_reports_json(out, rows),
    }
}

/// Generic row emitter for the sweep tables.
pub fn write_rows<W: Write, T: Serialize>(mut out: W, format: OutputFormat, rows: &[T]) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io("<csv>", e))?;
        }
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut out, rows)?;
            writeln!(out).map_err(|e| Error::io("<json>", e))?;
        }
    }
    Ok(())
}

/// Creates `path` (and its parent directories) for writing.
pub fn create_output(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTRow {
    pub t: f64,
    pub t_max: f64,
    pub at_t_max: bool,
    pub avg_loss: f64,
    pub std_err: f64,
    pub prial: f64,
    pub prial_se: f64,
}

/// `{0, ¼, ½, ¾, 1, 3/2, 2, 3, 5}·t_max`.
pub fn default_t_grid(p: usize, m: usize) -> Vec<f64> {
    let tm = t_max(p, m);
    [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0]
        .iter()
        .map(|f| f * tm)
        .collect()
}

/// Paired PRIAL of `a_o(S + (t/tr S⁺)SS⁺)` over `a_o S` for each `t`.
pub fn sweep_t(
    sc: &Scenario,
    t_grid: &[f64],
    loss: LossKind,
    reps: usize,
    seed: u64,
    pairing: Pairing,
) -> Result<Vec<SweepTRow>> {
    if t_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidParameter("t grid must be nonnegative".into()));
    }
    let a = a_optimal(sc.p(), sc.m(), sc.k_star()?);
    let tm = t_max(sc.p(), sc.m());
    let mut specs = vec![EstimatorSpec::usual(a)?];
    for &t in t_grid {
        specs.push(EstimatorSpec::corrected(a, t)?);
    }
    let table = simulate_losses(sc, &specs, &[loss], reps, seed, pairing)?;
    t_grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let summary = table.summary(i + 1, 0);
            let pr = table.prial(0, i + 1, 0)?;
            Ok(SweepTRow {
                t,
                t_max: tm,
                at_t_max: (t - tm).abs() <= 1e-12 * tm.max(1.0),
                avg_loss: summary.mean,
                std_err: summary.std_err,
                prial: pr.prial,
                prial_se: pr.std_err,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepARow {
    pub a: f64,
    pub a_optimal: f64,
    pub avg_loss: f64,
    pub std_err: f64,
    pub argmin: bool,
}

/// `a_o·(0.4, 0.45, …, 1.6)`: 25 points with step `a_o/20`.
pub fn default_a_grid(p: usize, m: usize, k_star: f64) -> Vec<f64> {
    let ao = a_optimal(p, m, k_star);
    (0..25).map(|k| ao * (0.4 + 0.05 * k as f64)).collect()
}

/// Paired empirical risk of `aS` over the grid; marks the argmin.
pub fn sweep_a(
    sc: &Scenario,
    a_grid: &[f64],
    loss: LossKind,
    reps: usize,
    seed: u64,
    pairing: Pairing,
) -> Result<Vec<SweepARow>> {
    if a_grid.is_empty() {
        return Err(Error::InvalidParameter("empty a grid".into()));
    }
    let ao = a_optimal(sc.p(), sc.m(), sc.k_star()?);
    let specs = a_grid
        .iter()
        .map(|&a| EstimatorSpec::usual(a))
        .collect::<Result<Vec<_>>>()?;
    let table = simulate_losses(sc, &specs, &[loss], reps, seed, pairing)?;
    let mut rows: Vec<SweepARow> = a_grid
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let s = table.summary(i, 0);
            SweepARow {
                a,
                a_optimal: ao,
                avg_loss: s.mean,
                std_err: s.std_err,
                argmin: false,
            }
        })
        .collect();
    let best = rows
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.avg_loss.total_cmp(&y.1.avg_loss))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    rows[best].argmin = true;
    Ok(rows)
}

/// Identity check for `G = (t/tr S⁺)·SS⁺` at `t = t_max` (or 1 when the
/// dominance interval is degenerate).
pub fn verify(sc: &Scenario, reps: usize, seed: u64, cfg: &HaffOperatorConfig) -> Result<IdentityReport> {
    let tm = t_max(sc.p(), sc.m());
    let t = if tm > 0.0 { tm } else { 1.0 };
    verify_identity(sc, konno_g(t), reps, seed, cfg)
}

/// Human-readable identity verdict.
pub fn format_identity(report: &IdentityReport) -> String {
    format!(
        "lhs = {} ± {}\nrhs = {} ± {}\n|lhs - rhs| = {} ({:.2} combined se, {} reps)\n{}",
        format_g(report.lhs.mean, 6),
        format_g(report.lhs.std_err, 3),
        format_g(report.rhs.mean, 6),
        format_g(report.rhs.std_err, 3),
        format_g((report.lhs.mean - report.rhs.mean).abs(), 3),
        report.z_score(),
        report.reps,
        if report.pass { "PASS" } else { "FAIL" }
    )
}
