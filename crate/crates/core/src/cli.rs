//! Batch command-line front end.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::baselines::wsi_estimate;
use crate::basis::BasisKind;
use crate::bridge::fit_bridge_minimax;
use crate::config::{RunConfig, Variant};
use crate::data::{assign_folds, load_csv, validate_roles, Dataset};
use crate::diagnostics::{self, completeness_rank_check, DiagnosticsReport};
use crate::error::{NsiError, Result};
use crate::estimator::{estimate_nsi_with_folds, NsiResult};
use crate::gmm::Weighting;
use crate::report::{
    self, build_table, BridgeCurve, BridgesReport, Cell, DataSummary, DiagnoseReport,
    EstimateReport, VariantFailure, VariantReport, SCHEMA_VERSION,
};
use crate::score::{RieszTarget, ScoreMatrix};
use crate::simulation::{self, run_monte_carlo, summarize_table1, McAggregates, Table1};

#[derive(Debug, Parser)]
#[command(
    name = "nsi",
    version,
    about = "Nonparametric scaled-index estimation of latent treatment effects"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// Comma-separated estimator list.
    #[arg(long, global = true, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    #[arg(long, global = true, value_parser = parse_weighting)]
    pub weighting: Option<Weighting>,
    /// Input CSV, overriding the configured data path.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

fn parse_weighting(s: &str) -> std::result::Result<Weighting, String> {
    s.parse().map_err(|e: NsiError| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate treatment coefficients for one study.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the two-study Monte Carlo comparison.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Wald tests of equal coefficients between two estimate reports.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
        #[arg(long)]
        coefficient: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Identification diagnostics without pooling.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl CommonArgs {
    /// Config file values overridden by any flag that was given.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        if let Some(r) = self.reps {
            cfg.simulation.reps = r;
        }
        if let Some(k) = self.folds {
            cfg.folds = k;
        }
        if let Some(e) = &self.estimators {
            cfg.estimators = Some(e.clone());
        }
        if let Some(w) = self.weighting {
            cfg.weighting = w;
        }
        if let Some(d) = &self.data {
            cfg.data.get_or_insert_with(Default::default).path = Some(d.clone());
        }
        Ok(cfg)
    }
}

/// Structured error payload written to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorPayload {
    pub error: ErrorBody,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

pub fn error_payload(err: &NsiError) -> String {
    let payload = ErrorPayload {
        error: ErrorBody {
            kind: err.kind().to_string(),
            message: err.to_string(),
            exit_code: err.exit_code(),
        },
    };
    serde_json::to_string(&payload).unwrap_or_else(|_| err.to_string())
}

/// Runs a parsed command; returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::Estimate { common } => cmd_estimate(&common.resolve()?),
        Command::Simulate { common } => cmd_simulate(&common.resolve()?),
        Command::Compare {
            report_a,
            report_b,
            coefficient,
            common,
        } => cmd_compare(report_a, report_b, coefficient, &common.resolve()?),
        Command::Diagnose { common } => cmd_diagnose(&common.resolve()?),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| NsiError::io(dir, e))
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Option<String>)> {
    let data = cfg.data()?;
    let path = data.path.as_ref().ok_or_else(|| {
        NsiError::Config("no input data path (config [data].path or --data)".into())
    })?;
    let roles = data.roles();
    let ds = load_csv(path, &roles)?;
    Ok((ds, Some(path.display().to_string())))
}

fn design_pi_for(cfg: &RunConfig, target: &RieszTarget) -> Option<f64> {
    match target {
        RieszTarget::HtContrast { treatment } => cfg.design_pi.get(treatment).copied(),
        RieszTarget::Regression { .. } => None,
    }
}

fn data_summary(ds: &Dataset, path: Option<String>) -> DataSummary {
    DataSummary {
        path,
        n: ds.n(),
        dropped: ds.dropped(),
        roles: validate_roles(ds),
    }
}

struct NsiRun {
    name: &'static str,
    kind: BasisKind,
    result: NsiResult,
}

fn run_nsi_variants(
    cfg: &RunConfig,
    ds: &Dataset,
    kinds: &[BasisKind],
) -> Vec<(BasisKind, Result<NsiResult>)> {
    let fit = |kind: BasisKind| -> Result<NsiResult> {
        let target = RieszTarget::default_for(ds)?;
        let folds = assign_folds(ds.n(), cfg.folds, cfg.seed()?)?;
        let nsi = cfg.nsi_config(kind, design_pi_for(cfg, &target))?;
        estimate_nsi_with_folds(ds, &folds, &nsi)
    };
    kinds.iter().map(|&kind| (kind, fit(kind))).collect()
}

fn combined_scores_csv(runs: &[NsiRun], out: &mut impl Write) -> Result<()> {
    let io = |e| NsiError::io("<scores>", e);
    let Some(first) = runs.first() else {
        return Ok(());
    };
    let folds = &first.result.crossfit.scores.folds;
    let mut header = vec!["unit".to_string(), "fold".to_string()];
    let mut blocks: Vec<DMatrix<f64>> = Vec::new();
    for run in runs {
        let s: &ScoreMatrix = &run.result.crossfit.scores;
        header.extend(s.column_names().iter().map(|c| format!("{}.{c}", run.name)));
        blocks.push(s.stacked());
    }
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for i in 0..first.result.crossfit.scores.n() {
        let mut line = format!("{},{}", i, folds.fold_of[i]);
        for b in &blocks {
            for v in b.row(i).iter() {
                line.push(',');
                line.push_str(&v.to_string());
            }
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(())
}

fn bridge_curves(cfg: &RunConfig, ds: &Dataset, runs: &[NsiRun]) -> Result<Vec<BridgeCurve>> {
    let seed = cfg.seed()?;
    let mut out = Vec::new();
    for run in runs {
        let nsi = cfg.nsi_config(run.kind, None)?;
        for m in &ds.roles().measurements {
            let fit = fit_bridge_minimax(ds, m, &nsi.phi_basis, &nsi.w_basis, &nsi.hyper, seed)?;
            let y = ds.column(m)?;
            let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let grid: Vec<f64> = (0..50).map(|i| lo + (hi - lo) * i as f64 / 49.0).collect();
            let phi = fit.apply(&grid)?;
            out.push(BridgeCurve {
                variant: run.name.to_string(),
                measurement: m.clone(),
                instruments: fit.instruments.clone(),
                hyper: fit.hyper,
                beta: fit.beta.iter().cloned().collect(),
                instrument_strength: diagnostics::instrument_strength(&fit)?,
                grid,
                phi,
            });
        }
    }
    Ok(out)
}

/// Builds the estimate report without touching the filesystem.
pub fn estimate_report(
    cfg: &RunConfig,
    ds: &Dataset,
    path: Option<String>,
) -> Result<(EstimateReport, Vec<u8>, BridgesReport)> {
    let variants = cfg.variants()?;
    let kinds: Vec<BasisKind> = variants
        .iter()
        .filter_map(|v| match v {
            Variant::Nsi(k) => Some(*k),
            Variant::Wsi => None,
        })
        .collect();
    let mut runs = Vec::new();
    for (kind, res) in run_nsi_variants(cfg, ds, &kinds) {
        runs.push(NsiRun {
            name: kind.label(),
            kind,
            result: res?,
        });
    }
    let measurements: Vec<String> = std::iter::once(ds.roles().benchmark.clone())
        .chain(ds.roles().measurements.iter().cloned())
        .collect();
    let mut reports = Vec::new();
    let mut diagnostics = BTreeMap::new();
    let mut warnings = validate_roles(ds).warnings;
    for v in &variants {
        match v {
            Variant::Nsi(kind) => {
                let run = runs.iter().find(|r| r.kind == *kind).expect("fitted above");
                let mut vr = VariantReport::from_gmm(run.name, &measurements, &run.result.estimate);
                if run.result.crossfit.scores.pi.iter().any(Option::is_some) {
                    vr.notes
                        .push("HT contrast with per-fold treatment shares".into());
                }
                warnings.extend(
                    run.result
                        .diagnostics
                        .warnings
                        .iter()
                        .map(|w| format!("{}: {w}", run.name)),
                );
                diagnostics.insert(run.name.to_string(), run.result.diagnostics.clone());
                reports.push(vr);
            }
            Variant::Wsi => {
                let target = RieszTarget::default_for(ds)?;
                let est = wsi_estimate(
                    ds,
                    &cfg.wsi.instrument(),
                    &target,
                    design_pi_for(cfg, &target),
                )?;
                reports.push(VariantReport {
                    name: "wsi".into(),
                    method: "wsi".into(),
                    coefficients: est.coefficients.clone(),
                    cells: est
                        .beta_hat
                        .iter()
                        .zip(&est.se)
                        .map(|(&b, &s)| Cell::new(b, s))
                        .collect(),
                    cov: None,
                    weighting: None,
                    j_stat: None,
                    j_df: None,
                    j_p_value: None,
                    per_measurement: BTreeMap::new(),
                    se_kind: est.se_kind.clone(),
                    notes: vec![format!(
                        "instrument '{}'; scale factors {:?}; standard errors treat scale factors as known",
                        est.instrument,
                        est.index.lambdas.clone().unwrap_or_default()
                    )],
                });
            }
        }
    }
    let treatments = &ds.roles().treatments;
    let rows: Vec<String> = reports
        .first()
        .map(|r| {
            r.coefficients
                .iter()
                .filter(|c| treatments.contains(c))
                .cloned()
                .collect()
        })
        .unwrap_or_default();
    let report = EstimateReport {
        schema_version: SCHEMA_VERSION,
        command: "estimate".into(),
        config: cfg.to_json_value(),
        data: data_summary(ds, path),
        table: build_table(&rows, &reports),
        rows,
        columns: reports.iter().map(|r| r.name.clone()).collect(),
        variants: reports,
        diagnostics,
        warnings,
    };
    let mut scores = Vec::new();
    combined_scores_csv(&runs, &mut scores)?;
    let bridges = BridgesReport {
        schema_version: SCHEMA_VERSION,
        bridges: bridge_curves(cfg, ds, &runs)?,
    };
    Ok((report, scores, bridges))
}

pub fn cmd_estimate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.seed()?;
    let (ds, path) = load_dataset(cfg)?;
    let (report, scores, bridges) = estimate_report(cfg, &ds, path)?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let files = vec![
        dir.join("report.json"),
        dir.join("scores.csv"),
        dir.join("bridges.json"),
    ];
    report::write_json(&files[0], &report)?;
    report::write_bytes(&files[1], &scores)?;
    report::write_json(&files[2], &bridges)?;
    Ok(files)
}

#[derive(Debug, Serialize)]
pub struct SimulateReport {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub table1: Table1,
    pub aggregates: BTreeMap<String, McAggregates>,
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mc = cfg.mc_config()?;
    let spec = &cfg.simulation.dgp;
    let results = run_monte_carlo(spec, &mc)?;
    let table = summarize_table1(&results, spec, &mc);
    let summary = SimulateReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.to_json_value(),
        table1: table,
        aggregates: results
            .values()
            .map(|r| (r.estimator.label().to_string(), r.aggregates.clone()))
            .collect(),
    };
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let files = vec![
        dir.join("table1.json"),
        dir.join("replications.csv"),
        dir.join("gaps.csv"),
    ];
    report::write_json(&files[0], &summary)?;
    let mut buf = Vec::new();
    simulation::write_replications_csv(&results, &mut buf)?;
    report::write_bytes(&files[1], &buf)?;
    let mut buf = Vec::new();
    simulation::write_gap_histogram_csv(&results, cfg.simulation.histogram_bins.max(1), &mut buf)?;
    report::write_bytes(&files[2], &buf)?;
    Ok(files)
}

pub fn cmd_compare(a: &Path, b: &Path, coefficient: &str, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ra: EstimateReport = report::read_json(a)?;
    let rb: EstimateReport = report::read_json(b)?;
    let cmp = report::compare_reports(&ra, &rb, coefficient)?;
    for w in &cmp.warnings {
        log::warn!("{w}");
    }
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let file = dir.join("comparison.json");
    report::write_json(&file, &cmp)?;
    Ok(vec![file])
}

pub fn diagnose_report(cfg: &RunConfig) -> Result<DiagnoseReport> {
    let mut warnings = Vec::new();
    let completeness = match &cfg.diagnose.completeness_table {
        Some(rows) => {
            let k = rows.len();
            let m = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != m) {
                return Err(NsiError::Config(
                    "completeness table rows differ in length".into(),
                ));
            }
            let table = DMatrix::from_fn(k, m, |i, j| rows[i][j]);
            let check = completeness_rank_check(&table)?;
            if !check.pass {
                warnings.push(format!(
                    "completeness surrogate failed: rank {} < {}",
                    check.rank, check.required_rank
                ));
            }
            Some(check)
        }
        None => None,
    };
    let mut variants = BTreeMap::new();
    let mut failures = Vec::new();
    let mut data = None;
    if cfg.data.as_ref().and_then(|d| d.path.as_ref()).is_some() {
        cfg.seed()?;
        let (ds, path) = load_dataset(cfg)?;
        let summary = data_summary(&ds, path);
        warnings.extend(summary.roles.warnings.iter().cloned());
        data = Some(summary);
        let kinds: Vec<BasisKind> = cfg
            .variants()?
            .into_iter()
            .filter_map(|v| match v {
                Variant::Nsi(k) => Some(k),
                Variant::Wsi => None,
            })
            .collect();
        for (kind, res) in run_nsi_variants(cfg, &ds, &kinds) {
            match res {
                Ok(r) => {
                    warnings.extend(
                        r.diagnostics
                            .warnings
                            .iter()
                            .map(|w| format!("{}: {w}", kind.label())),
                    );
                    variants.insert(kind.label().to_string(), r.diagnostics);
                }
                Err(e) => {
                    warnings.push(format!("{}: {e}", kind.label()));
                    failures.push(VariantFailure {
                        variant: kind.label().to_string(),
                        error_kind: e.kind().to_string(),
                        message: e.to_string(),
                    });
                    variants.insert(kind.label().to_string(), DiagnosticsReport::default());
                }
            }
        }
    } else if completeness.is_none() {
        return Err(NsiError::Config(
            "nothing to diagnose: give [data] or [diagnose].completeness_table".into(),
        ));
    }
    Ok(DiagnoseReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.to_json_value(),
        data,
        completeness,
        variants,
        failures,
        warnings,
    })
}

pub fn cmd_diagnose(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let report = diagnose_report(cfg)?;
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    let file = dir.join("diagnostics.json");
    report::write_json(&file, &report)?;
    Ok(vec![file])
}
