//! Two-study synthetic experiment and Monte Carlo comparison of estimators.
//!
//! Both studies share the benchmark `Y₁`, the treatment and the covariate
//! draws; they differ only in how the auxiliary measurements encode the latent
//! outcome. A comparable estimator should therefore report the same effect in
//! both studies up to sampling noise.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, IcwStandardization, PcaScale, WsiInstrument};
use crate::basis::{BasisKind, BasisSpec};
use crate::data::{ColumnRoles, Dataset};
use crate::error::{NsiError, Result};
use crate::estimator::{estimate_nsi, NsiConfig};
use crate::gmm::{chi2_quantile, wald_equality};
use crate::score::RieszTarget;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
        }
    }
}

/// Data-generating process for one study.
///
/// `η = c₁x + c₂x² + u + (t₀ + t₁x)·Z`, and measurement `j` is
/// `Σ_k maps[j][k]·η^k + e_j` with `e_j ~ N(0, noise_sd[j]²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub n: usize,
    pub sigma_u: f64,
    pub noise_sd: Vec<f64>,
    pub eta0_coeffs: [f64; 2],
    pub tau_coeffs: [f64; 2],
    pub pi: f64,
    /// Polynomial coefficients in η (constant first) per measurement, study A.
    pub maps_a: Vec<Vec<f64>>,
    /// Same for study B; the first (benchmark) map must equal study A's.
    pub maps_b: Vec<Vec<f64>>,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n: 800,
            sigma_u: 1.0,
            noise_sd: vec![0.5; 3],
            eta0_coeffs: [0.9, 0.3],
            tau_coeffs: [0.8, 0.3],
            pi: 0.5,
            maps_a: vec![
                vec![0.0, 1.0],
                vec![0.0, 1.0, 0.3, 0.1],
                vec![0.0, 0.8, 0.0, 0.2],
            ],
            maps_b: vec![
                vec![0.0, 1.0],
                vec![0.0, 1.5, 0.25],
                vec![0.0, 1.0, 0.15, 0.05],
            ],
        }
    }
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn poly_slope(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, c)| acc * x + k as f64 * c)
}

impl DgpSpec {
    /// Linear measurements `Y_j = λ_j η + e_j` with `λ = (1, 2, 0.5)` in both studies.
    pub fn linear(n: usize) -> Self {
        let maps = vec![vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 0.5]];
        DgpSpec {
            n,
            maps_a: maps.clone(),
            maps_b: maps,
            ..DgpSpec::default()
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn true_alte(&self) -> f64 {
        // E[x] = 0 under the standard-normal covariate law.
        self.tau_coeffs[0]
    }

    pub fn maps(&self, variant: Variant) -> &[Vec<f64>] {
        match variant {
            Variant::A => &self.maps_a,
            Variant::B => &self.maps_b,
        }
    }

    pub fn n_measurements(&self) -> usize {
        self.noise_sd.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NsiError::Config(m));
        if self.n < 10 {
            return bad(format!("study size {} is below 10", self.n));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return bad(format!("treatment probability {} outside (0, 1)", self.pi));
        }
        if !(self.sigma_u >= 0.0) || self.noise_sd.iter().any(|s| !(*s >= 0.0)) {
            return bad("standard deviations must be nonnegative".into());
        }
        let j = self.n_measurements();
        if j < 2 {
            return bad("at least two measurements are required".into());
        }
        for maps in [&self.maps_a, &self.maps_b] {
            if maps.len() != j {
                return bad(format!(
                    "{} measurement maps for {j} noise scales",
                    maps.len()
                ));
            }
            let first = &maps[0];
            let identity = poly(first, 0.0) == 0.0
                && poly_slope(first, 0.0) == 1.0
                && first.iter().skip(2).all(|&c| c == 0.0);
            if !identity {
                return bad("the benchmark map must be the identity".into());
            }
        }
        let (lo, hi) = self.eta_support();
        let grid: Vec<f64> = (0..=400)
            .map(|i| lo + (hi - lo) * i as f64 / 400.0)
            .collect();
        for (variant, maps) in [(Variant::A, &self.maps_a), (Variant::B, &self.maps_b)] {
            for (m, coeffs) in maps.iter().enumerate() {
                let slopes: Vec<f64> = grid.iter().map(|&e| poly_slope(coeffs, e)).collect();
                let increasing = slopes.iter().all(|&s| s > 0.0);
                let decreasing = slopes.iter().all(|&s| s < 0.0);
                if !increasing && !decreasing {
                    return bad(format!(
                        "study {} map {} is not strictly monotone on [{lo:.2}, {hi:.2}]",
                        variant.label(),
                        m + 1
                    ));
                }
            }
        }
        Ok(())
    }

    /// Central 99% range of η, from a fixed-seed pilot draw.
    pub fn eta_support(&self) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut eta: Vec<f64> = (0..20_000)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let u: f64 = rng.sample::<f64, _>(StandardNormal) * self.sigma_u;
                let z = rng.random_bool(self.pi) as u8 as f64;
                self.latent(x, u, z)
            })
            .collect();
        eta.sort_by(f64::total_cmp);
        let q = |p: f64| eta[((eta.len() - 1) as f64 * p).round() as usize];
        (q(0.005), q(0.995))
    }

    fn latent(&self, x: f64, u: f64, z: f64) -> f64 {
        self.eta0_coeffs[0] * x
            + self.eta0_coeffs[1] * x * x
            + u
            + (self.tau_coeffs[0] + self.tau_coeffs[1] * x) * z
    }
}

pub const MEASUREMENT_NAMES: [&str; 3] = ["y1", "y2", "y3"];

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub variant: Variant,
    pub dataset: Dataset,
    pub eta: Vec<f64>,
    pub true_alte: f64,
}

fn measurement_name(j: usize) -> String {
    MEASUREMENT_NAMES
        .get(j)
        .map_or_else(|| format!("y{}", j + 1), |s| s.to_string())
}

/// Roles used for simulated studies: `y1` benchmark, the remaining
/// measurements bridged with `(z, x, other measurements)` as instruments.
pub fn study_roles(n_measurements: usize) -> ColumnRoles {
    let measurements: Vec<String> = (1..n_measurements).map(measurement_name).collect();
    let instruments: Vec<String> = ["z".to_string(), "x".to_string()]
        .into_iter()
        .chain(measurements.iter().cloned())
        .collect();
    ColumnRoles::new("y1")
        .with_measurements(&measurements)
        .with_treatments(&["z"])
        .with_instruments(&instruments)
}

/// Draws one study. Draw order is fixed (x, u, z, then noise row by row) so
/// that both variants under one seed share every random input.
pub fn generate_study(spec: &DgpSpec, variant: Variant, seed: u64) -> Result<Study> {
    spec.validate()?;
    let n = spec.n;
    let j = spec.n_measurements();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let u_law = Normal::new(0.0, spec.sigma_u).map_err(|e| NsiError::Config(e.to_string()))?;
    let u: Vec<f64> = (0..n).map(|_| u_law.sample(&mut rng)).collect();
    let z: Vec<f64> = (0..n)
        .map(|_| rng.random_bool(spec.pi) as u8 as f64)
        .collect();
    let noise: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..j)
                .map(|m| rng.sample::<f64, _>(StandardNormal) * spec.noise_sd[m])
                .collect()
        })
        .collect();
    let eta: Vec<f64> = (0..n).map(|i| spec.latent(x[i], u[i], z[i])).collect();
    let maps = spec.maps(variant);
    let mut names = Vec::with_capacity(j + 2);
    let mut columns = Vec::with_capacity(j + 2);
    for (m, coeffs) in maps.iter().enumerate() {
        names.push(measurement_name(m));
        columns.push((0..n).map(|i| poly(coeffs, eta[i]) + noise[i][m]).collect());
    }
    names.push("z".into());
    columns.push(z);
    names.push("x".into());
    columns.push(x);
    let dataset = Dataset::from_columns(names, columns, study_roles(j))?;
    Ok(Study {
        variant,
        dataset,
        eta,
        true_alte: spec.true_alte(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Pca,
    Icw,
    Wsi,
    Nsi,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Pca,
        EstimatorKind::Icw,
        EstimatorKind::Wsi,
        EstimatorKind::Nsi,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Pca => "PCA",
            EstimatorKind::Icw => "ICW",
            EstimatorKind::Wsi => "WSI",
            EstimatorKind::Nsi => "NSI",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = NsiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pca" => Ok(EstimatorKind::Pca),
            "icw" => Ok(EstimatorKind::Icw),
            "wsi" => Ok(EstimatorKind::Wsi),
            "nsi" => Ok(EstimatorKind::Nsi),
            other => Err(NsiError::InvalidArgument(format!(
                "unknown estimator '{other}' (pca|icw|wsi|nsi)"
            ))),
        }
    }
}

/// NSI settings used by the Monte Carlo harness: Gaussian-kernel dictionaries
/// with 30 Nyström centers in both stages.
pub fn simulation_nsi_config() -> NsiConfig {
    let mut cfg = NsiConfig::new(BasisKind::KernelNystrom);
    cfg.phi_basis = BasisSpec::kernel(30);
    cfg.w_basis = BasisSpec::kernel(30);
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub estimators: Vec<EstimatorKind>,
    pub reps: usize,
    pub master_seed: u64,
    pub nsi: NsiConfig,
    pub pca_scale: PcaScale,
    pub icw_standardization: IcwStandardization,
    pub wsi_instrument: WsiInstrument,
    /// Design treatment probability used in HT weights instead of the sample share.
    pub design_pi: Option<f64>,
    pub alpha: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            estimators: EstimatorKind::ALL.to_vec(),
            reps: 300,
            master_seed: 20240601,
            nsi: simulation_nsi_config(),
            pca_scale: PcaScale::Correlation,
            icw_standardization: IcwStandardization::Control,
            wsi_instrument: WsiInstrument::Treatment,
            design_pi: None,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyEstimate {
    pub tau: f64,
    pub se: f64,
    pub j_stat: Option<f64>,
    pub j_df: Option<usize>,
}

/// Treatment effect of one study under one estimator.
pub fn estimate_study(
    study: &Study,
    kind: EstimatorKind,
    cfg: &McConfig,
    seed: u64,
) -> Result<StudyEstimate> {
    let ds = &study.dataset;
    let z = ds.column("z")?;
    let pi = cfg.design_pi;
    let cols: Vec<String> = std::iter::once(ds.roles().benchmark.clone())
        .chain(ds.roles().measurements.iter().cloned())
        .collect();
    let plain = |c: baselines::Contrast| StudyEstimate {
        tau: c.tau_hat,
        se: c.se,
        j_stat: None,
        j_df: None,
    };
    match kind {
        EstimatorKind::Pca => {
            let fit = baselines::pca_index(&ds.matrix(&cols)?, cfg.pca_scale)?;
            baselines::index_diff_in_means(&fit.index_values, z, pi).map(plain)
        }
        EstimatorKind::Icw => {
            let fit = baselines::icw_index(&ds.matrix(&cols)?, Some(z), cfg.icw_standardization)?;
            baselines::index_diff_in_means(&fit.index_values, z, pi).map(plain)
        }
        EstimatorKind::Wsi => {
            let target = RieszTarget::HtContrast {
                treatment: "z".into(),
            };
            let est = baselines::wsi_estimate(ds, &cfg.wsi_instrument, &target, pi)?;
            Ok(StudyEstimate {
                tau: est.beta_hat[0],
                se: est.se[0],
                j_stat: None,
                j_df: None,
            })
        }
        EstimatorKind::Nsi => {
            let mut nsi = cfg.nsi.clone();
            nsi.seed = seed;
            if cfg.design_pi.is_some() {
                nsi.design_pi = cfg.design_pi;
            }
            let res = estimate_nsi(ds, &nsi)?;
            Ok(StudyEstimate {
                tau: res.estimate.beta_hat[0],
                se: res.estimate.se[0],
                j_stat: res.estimate.j_stat,
                j_df: res.estimate.j_stat.map(|_| res.estimate.j_df),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub rep: usize,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub tau_a: f64,
    pub se_a: f64,
    pub tau_b: f64,
    pub se_b: f64,
    pub gap: f64,
    pub wald_stat: f64,
    pub wald_p: f64,
    pub j_stat_a: Option<f64>,
    pub j_stat_b: Option<f64>,
    pub j_df: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McFailure {
    pub rep: usize,
    pub estimator: EstimatorKind,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McAggregates {
    pub completed: usize,
    pub failed: usize,
    pub failure_rate: f64,
    /// Mean absolute difference between the two studies' estimates.
    pub mean_gap: f64,
    pub mean_signed_gap: f64,
    pub rejection_rate: f64,
    pub mean_tau_a: f64,
    pub mean_tau_b: f64,
    pub sd_tau_a: f64,
    pub mean_se_a: f64,
    /// Share of study-A intervals `τ̂ ± z·se` covering the true effect.
    pub coverage_a: f64,
    pub coverage_b: f64,
    /// Share of studies whose overidentification test rejects, when reported.
    pub j_rejection_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub estimator: EstimatorKind,
    pub reps: usize,
    pub true_alte: f64,
    pub records: Vec<McRecord>,
    pub failures: Vec<McFailure>,
    pub aggregates: McAggregates,
}

/// Data seed of replication `r`.
pub fn replication_seed(master_seed: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep as u64);
    rng.next_u64()
}

fn aggregate(records: &[McRecord], failed: usize, true_alte: f64, alpha: f64) -> McAggregates {
    let n = records.len();
    let nf = n as f64;
    let mean = |f: &dyn Fn(&McRecord) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            records.iter().map(f).sum::<f64>() / nf
        }
    };
    let crit = chi2_quantile(1.0 - alpha, 1).sqrt();
    let covered = |t: f64, s: f64| ((t - true_alte).abs() <= crit * s) as u8 as f64;
    let mean_tau_a = mean(&|r| r.tau_a);
    let sd_tau_a = if n > 1 {
        (records
            .iter()
            .map(|r| (r.tau_a - mean_tau_a).powi(2))
            .sum::<f64>()
            / (nf - 1.0))
            .sqrt()
    } else {
        f64::NAN
    };
    let j_tests: Vec<f64> = records
        .iter()
        .flat_map(|r| {
            let df = r.j_df.unwrap_or(0);
            [r.j_stat_a, r.j_stat_b]
                .into_iter()
                .flatten()
                .filter(move |_| df > 0)
                .map(move |j| (j > chi2_quantile(1.0 - alpha, df)) as u8 as f64)
        })
        .collect();
    McAggregates {
        completed: n,
        failed,
        failure_rate: failed as f64 / (n + failed).max(1) as f64,
        mean_gap: mean(&|r| r.gap.abs()),
        mean_signed_gap: mean(&|r| r.gap),
        rejection_rate: mean(&|r| (r.wald_p < alpha) as u8 as f64),
        mean_tau_a,
        mean_tau_b: mean(&|r| r.tau_b),
        sd_tau_a,
        mean_se_a: mean(&|r| r.se_a),
        coverage_a: mean(&|r| covered(r.tau_a, r.se_a)),
        coverage_b: mean(&|r| covered(r.tau_b, r.se_b)),
        j_rejection_rate: (!j_tests.is_empty())
            .then(|| j_tests.iter().sum::<f64>() / j_tests.len() as f64),
    }
}

type RepOutcome = Vec<std::result::Result<McRecord, McFailure>>;

fn run_replication(
    spec: &DgpSpec,
    cfg: &McConfig,
    rep: usize,
    variants: (Variant, Variant),
) -> Result<RepOutcome> {
    let seed = replication_seed(cfg.master_seed, rep);
    let a = generate_study(spec, variants.0, seed)?;
    let b = generate_study(spec, variants.1, seed)?;
    let fit_seed = seed.rotate_left(17) ^ 0xa076_1d64_78bd_642f;
    Ok(cfg
        .estimators
        .iter()
        .map(|&kind| {
            let fail = |e: NsiError| McFailure {
                rep,
                estimator: kind,
                error: e.to_string(),
            };
            let ea = estimate_study(&a, kind, cfg, fit_seed).map_err(fail)?;
            let eb = estimate_study(&b, kind, cfg, fit_seed).map_err(fail)?;
            let wald = wald_equality(ea.tau, ea.se, eb.tau, eb.se).map_err(fail)?;
            Ok(McRecord {
                rep,
                estimator: kind,
                seed,
                tau_a: ea.tau,
                se_a: ea.se,
                tau_b: eb.tau,
                se_b: eb.se,
                gap: wald.gap,
                wald_stat: wald.stat,
                wald_p: wald.p_value,
                j_stat_a: ea.j_stat,
                j_stat_b: eb.j_stat,
                j_df: ea.j_df,
            })
        })
        .collect())
}

/// Runs `cfg.reps` replications comparing study A with study B.
pub fn run_monte_carlo(
    spec: &DgpSpec,
    cfg: &McConfig,
) -> Result<BTreeMap<EstimatorKind, McResult>> {
    run_monte_carlo_variants(spec, cfg, (Variant::A, Variant::B))
}

/// As [`run_monte_carlo`] with an explicit study pair (e.g. `(A, A)` for a
/// self-comparison).
pub fn run_monte_carlo_variants(
    spec: &DgpSpec,
    cfg: &McConfig,
    variants: (Variant, Variant),
) -> Result<BTreeMap<EstimatorKind, McResult>> {
    if cfg.reps == 0 {
        return Err(NsiError::InvalidArgument("reps must be at least 1".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(NsiError::InvalidArgument("no estimators selected".into()));
    }
    spec.validate()?;
    let outcomes = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_replication(spec, cfg, rep, variants))
        .collect::<Result<Vec<_>>>()?;
    let mut records: BTreeMap<EstimatorKind, (Vec<McRecord>, Vec<McFailure>)> = cfg
        .estimators
        .iter()
        .map(|&k| (k, (Vec::new(), Vec::new())))
        .collect();
    for outcome in outcomes.into_iter().flatten() {
        match outcome {
            Ok(r) => records.get_mut(&r.estimator).unwrap().0.push(r),
            Err(f) => {
                log::warn!("replication {} {}: {}", f.rep, f.estimator.label(), f.error);
                records.get_mut(&f.estimator).unwrap().1.push(f)
            }
        }
    }
    Ok(records
        .into_iter()
        .map(|(kind, (recs, fails))| {
            let aggregates = aggregate(&recs, fails.len(), spec.true_alte(), cfg.alpha);
            (
                kind,
                McResult {
                    estimator: kind,
                    reps: cfg.reps,
                    true_alte: spec.true_alte(),
                    records: recs,
                    failures: fails,
                    aggregates,
                },
            )
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub estimator: String,
    pub mean_gap: f64,
    pub rejection_rate: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub schema_version: u32,
    pub n: usize,
    pub reps: usize,
    pub master_seed: u64,
    pub true_alte: f64,
    pub rows: Vec<Table1Row>,
}

pub fn summarize_table1(
    results: &BTreeMap<EstimatorKind, McResult>,
    spec: &DgpSpec,
    cfg: &McConfig,
) -> Table1 {
    Table1 {
        schema_version: crate::report::SCHEMA_VERSION,
        n: spec.n,
        reps: cfg.reps,
        master_seed: cfg.master_seed,
        true_alte: spec.true_alte(),
        rows: results
            .values()
            .map(|r| Table1Row {
                estimator: r.estimator.label().to_string(),
                mean_gap: r.aggregates.mean_gap,
                rejection_rate: r.aggregates.rejection_rate,
                completed: r.aggregates.completed,
                failed: r.aggregates.failed,
            })
            .collect(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One row per replication and estimator.
pub fn write_replications_csv(
    results: &BTreeMap<EstimatorKind, McResult>,
    out: &mut impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "estimator",
        "rep",
        "seed",
        "tau_a",
        "se_a",
        "tau_b",
        "se_b",
        "gap",
        "wald_stat",
        "wald_p",
        "j_stat_a",
        "j_stat_b",
    ])?;
    for r in results.values().flat_map(|m| &m.records) {
        w.write_record([
            r.estimator.label().to_string(),
            r.rep.to_string(),
            r.seed.to_string(),
            r.tau_a.to_string(),
            r.se_a.to_string(),
            r.tau_b.to_string(),
            r.se_b.to_string(),
            r.gap.to_string(),
            r.wald_stat.to_string(),
            r.wald_p.to_string(),
            opt(r.j_stat_a),
            opt(r.j_stat_b),
        ])?;
    }
    w.flush().map_err(|e| NsiError::io("<replications>", e))
}

/// Histogram counts of study gaps, shared bin edges across estimators.
pub fn write_gap_histogram_csv(
    results: &BTreeMap<EstimatorKind, McResult>,
    bins: usize,
    out: &mut impl Write,
) -> Result<()> {
    let gaps: Vec<f64> = results
        .values()
        .flat_map(|m| m.records.iter().map(|r| r.gap))
        .collect();
    let lo = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if gaps.is_empty() || lo == hi {
        (lo.min(0.0) - 0.5, hi.max(0.0) + 0.5)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / bins as f64;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["estimator", "bin_lo", "bin_hi", "count"])?;
    for m in results.values() {
        let mut counts = vec![0usize; bins];
        for r in &m.records {
            let b = (((r.gap - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            w.write_record([
                m.estimator.label().to_string(),
                (lo + b as f64 * width).to_string(),
                (lo + (b + 1) as f64 * width).to_string(),
                c.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| NsiError::io("<gaps>", e))
}

pub fn write_outputs(
    dir: impl AsRef<Path>,
    results: &BTreeMap<EstimatorKind, McResult>,
    table: &Table1,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| NsiError::io(dir, e))?;
    crate::report::write_json(dir.join("table1.json"), table)?;
    let mut buf = Vec::new();
    write_replications_csv(results, &mut buf)?;
    crate::report::write_bytes(dir.join("replications.csv"), &buf)?;
    let mut buf = Vec::new();
    write_gap_histogram_csv(results, 30, &mut buf)?;
    crate::report::write_bytes(dir.join("gaps.csv"), &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        DgpSpec::default().validate().unwrap();
        DgpSpec::linear(500).validate().unwrap();
        assert_eq!(DgpSpec::default().true_alte(), 0.8);
    }

    #[test]
    fn non_monotone_map_rejected() {
        let mut spec = DgpSpec::default();
        spec.maps_b[1] = vec![0.0, 0.0, 1.0];
        assert!(matches!(spec.validate(), Err(NsiError::Config(_))));
        let mut spec = DgpSpec::default();
        spec.maps_a[0] = vec![0.0, 2.0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn noiseless_identity_maps() {
        let mut spec = DgpSpec::linear(50);
        spec.noise_sd = vec![0.0; 3];
        spec.maps_a = vec![vec![0.0, 1.0]; 3];
        let s = generate_study(&spec, Variant::A, 4).unwrap();
        for name in ["y2", "y3"] {
            assert_eq!(s.dataset.column(name).unwrap(), s.dataset.benchmark());
        }
        assert_eq!(s.dataset.benchmark(), s.eta.as_slice());
    }

    #[test]
    fn variants_share_benchmark() {
        let spec = DgpSpec::default().with_n(100);
        let a = generate_study(&spec, Variant::A, 8).unwrap();
        let b = generate_study(&spec, Variant::B, 8).unwrap();
        for c in ["y1", "z", "x"] {
            assert_eq!(a.dataset.column(c).unwrap(), b.dataset.column(c).unwrap());
        }
        assert_ne!(
            a.dataset.column("y2").unwrap(),
            b.dataset.column("y2").unwrap()
        );
    }

    #[test]
    fn polynomial_helpers() {
        assert_eq!(poly(&[1.0, 2.0, 3.0], 2.0), 17.0);
        assert_eq!(poly_slope(&[1.0, 2.0, 3.0], 2.0), 14.0);
    }

    #[test]
    fn single_rep_single_estimator() {
        let cfg = McConfig {
            estimators: vec![EstimatorKind::Pca],
            reps: 1,
            ..McConfig::default()
        };
        let res = run_monte_carlo(&DgpSpec::default().with_n(200), &cfg).unwrap();
        assert_eq!(res.len(), 1);
        assert_eq!(res[&EstimatorKind::Pca].records.len(), 1);
    }

    #[test]
    fn self_comparison_has_no_gap() {
        let cfg = McConfig {
            estimators: vec![EstimatorKind::Pca, EstimatorKind::Icw, EstimatorKind::Wsi],
            reps: 4,
            ..McConfig::default()
        };
        let spec = DgpSpec::default().with_n(200);
        let res = run_monte_carlo_variants(&spec, &cfg, (Variant::A, Variant::A)).unwrap();
        for r in res.values() {
            for rec in &r.records {
                assert_eq!(rec.gap, 0.0);
                assert_eq!(rec.wald_p, 1.0);
            }
            assert_eq!(r.aggregates.rejection_rate, 0.0);
        }
        let table = summarize_table1(&res, &spec, &cfg);
        assert_eq!(
            table
                .rows
                .iter()
                .map(|r| r.estimator.as_str())
                .collect::<Vec<_>>(),
            vec!["PCA", "ICW", "WSI"]
        );
    }
}
