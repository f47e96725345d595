//! Identification diagnostics: a discrete completeness surrogate, first-stage
//! instrument strength and held-out orthogonality residuals.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeFit, MinimaxSystem, NuisanceFit};
use crate::data::Dataset;
use crate::error::{NsiError, Result};
use crate::linalg;
use crate::score::FoldFitSummary;

/// Instrument strength below this value is reported as weak identification.
pub const WEAK_INSTRUMENT_THRESHOLD: f64 = 0.05;

const RANK_TOL: f64 = 1e-8;
const GRAM_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessCheck {
    pub rank: usize,
    pub required_rank: usize,
    pub pass: bool,
    pub singular_values: Vec<f64>,
}

/// Full-rank check of `P(measurement category | latent category)` for a
/// `k × m` table of joint counts (latent categories in rows).
pub fn completeness_rank_check(joint_counts: &DMatrix<f64>) -> Result<CompletenessCheck> {
    let (k, m) = joint_counts.shape();
    if k == 0 || m == 0 {
        return Err(NsiError::InvalidArgument("empty contingency table".into()));
    }
    if joint_counts.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
        return Err(NsiError::InvalidArgument(
            "contingency counts must be finite and nonnegative".into(),
        ));
    }
    let row_sums = joint_counts.column_sum();
    let col_sums = joint_counts.row_sum();
    if row_sums.iter().chain(col_sums.iter()).any(|&s| s <= 0.0) {
        return Err(NsiError::InvalidArgument(
            "every row and column of the contingency table needs a positive total".into(),
        ));
    }
    let mut p = joint_counts.clone();
    for (i, mut row) in p.row_iter_mut().enumerate() {
        row /= row_sums[i];
    }
    let (rank, sv) = linalg::numerical_rank(&p, RANK_TOL);
    Ok(CompletenessCheck {
        rank,
        required_rank: k,
        pass: rank == k,
        singular_values: sv.iter().cloned().collect(),
    })
}

/// Smallest singular value of `G_c^{-1/2} B G_b^{-1/2}`.
pub fn instrument_strength_of(system: &MinimaxSystem) -> Result<f64> {
    let gc = linalg::pinv_sqrt(&system.g_c, GRAM_TOL);
    let gb = linalg::pinv_sqrt(&system.g_b, GRAM_TOL);
    let (rank_c, _) = linalg::numerical_rank(&system.g_c, GRAM_TOL);
    let (rank_b, _) = linalg::numerical_rank(&system.g_b, GRAM_TOL);
    let normalized = gc * &system.cross * gb;
    if normalized.iter().any(|v| !v.is_finite()) {
        return Err(NsiError::Numerical(
            "non-finite normalized cross-moment matrix".into(),
        ));
    }
    let mut sv: Vec<f64> = normalized
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    // Directions outside the support of either Gram are not identifiable
    // parameters and are dropped, so duplicated columns leave the value intact.
    let r = rank_b.min(rank_c);
    if r == 0 {
        return Ok(0.0);
    }
    Ok(sv[r - 1].clamp(0.0, 1.0))
}

pub fn instrument_strength(fit: &BridgeFit) -> Result<f64> {
    let value = instrument_strength_of(&fit.system)?;
    if value < WEAK_INSTRUMENT_THRESHOLD {
        log::debug!(
            "weak identification for '{}': instrument strength {value:.4}",
            fit.measurement
        );
    }
    Ok(value)
}

/// `max_k |Ê[(α̂ − q̂(W)) b_k(Y_j)]|` over the rows of `holdout`.
pub fn orthogonality_residual(
    holdout: &Dataset,
    bridge: &BridgeFit,
    nuisance: &NuisanceFit,
    alpha: &[f64],
) -> Result<f64> {
    let q = nuisance.q_values(bridge, holdout)?;
    let b = bridge.phi_features(holdout)?;
    residual_from_parts(&b, alpha, &q)
}

pub fn residual_from_parts(b: &DMatrix<f64>, alpha: &[f64], q: &[f64]) -> Result<f64> {
    if alpha.len() != b.nrows() || q.len() != b.nrows() {
        return Err(NsiError::DimensionMismatch {
            context: "orthogonality residual".into(),
            expected: b.nrows(),
            actual: alpha.len().min(q.len()),
        });
    }
    let diff = DVector::from_iterator(alpha.len(), alpha.iter().zip(q).map(|(a, q)| a - q));
    let moments = b.tr_mul(&diff) / b.nrows().max(1) as f64;
    Ok(moments.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())))
}

/// Per-measurement first-stage summary aggregated over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementDiagnostics {
    pub measurement: String,
    /// Smallest value over folds.
    pub instrument_strength: f64,
    /// Largest held-out orthogonality residual over folds and coefficients.
    pub foc_residual: f64,
    /// ξ-problem objective averaged over folds, one entry per coefficient.
    pub xi_objective: Vec<f64>,
    pub bridge_foc_residual: f64,
    pub weak: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub completeness: Option<CompletenessCheck>,
    pub measurements: Vec<MeasurementDiagnostics>,
    pub warnings: Vec<String>,
}

impl DiagnosticsReport {
    pub fn from_fits(fits: &[FoldFitSummary]) -> Self {
        let mut by: BTreeMap<&str, Vec<&FoldFitSummary>> = BTreeMap::new();
        let mut order = Vec::new();
        for f in fits {
            if !by.contains_key(f.measurement.as_str()) {
                order.push(f.measurement.as_str());
            }
            by.entry(f.measurement.as_str()).or_default().push(f);
        }
        let mut report = DiagnosticsReport::default();
        for name in order {
            let group = &by[name];
            let strength = group
                .iter()
                .map(|f| f.instrument_strength)
                .fold(f64::INFINITY, f64::min);
            let foc = group
                .iter()
                .map(|f| f.orthogonality_residual)
                .fold(0.0, f64::max);
            let d = group[0].xi_objective.len();
            let xi = (0..d)
                .map(|l| group.iter().map(|f| f.xi_objective[l]).sum::<f64>() / group.len() as f64)
                .collect();
            let bridge_foc = group
                .iter()
                .map(|f| f.bridge_foc_residual)
                .fold(0.0, f64::max);
            let weak = strength < WEAK_INSTRUMENT_THRESHOLD;
            if weak {
                report.warnings.push(format!(
                    "weak identification for measurement '{name}': instrument strength {strength:.4} < {WEAK_INSTRUMENT_THRESHOLD}"
                ));
            }
            report.measurements.push(MeasurementDiagnostics {
                measurement: name.to_string(),
                instrument_strength: strength,
                foc_residual: foc,
                xi_objective: xi,
                bridge_foc_residual: bridge_foc,
                weak,
            });
        }
        report
    }

    pub fn with_completeness(mut self, check: CompletenessCheck) -> Self {
        if !check.pass {
            self.warnings.push(format!(
                "completeness surrogate failed: rank {} < {}",
                check.rank, check.required_rank
            ));
        }
        self.completeness = Some(check);
        self
    }
}
