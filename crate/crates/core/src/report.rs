//! Serialized report layouts and deterministic file output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::RoleDiagnostics;
use crate::diagnostics::{CompletenessCheck, DiagnosticsReport};
use crate::error::{NsiError, Result};
use crate::gmm::{self, GmmEstimate, WaldTest};

pub const SCHEMA_VERSION: u32 = 1;

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)
        .map_err(|e| NsiError::Numerical(format!("report serialization: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| NsiError::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| NsiError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| NsiError::Schema(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
}

impl Cell {
    pub fn new(estimate: f64, se: f64) -> Self {
        Cell {
            estimate,
            se,
            p_value: gmm::two_sided_normal_p(estimate / se),
        }
    }
}

/// One estimator variant (an NSI basis family or the scaled index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub method: String,
    pub coefficients: Vec<String>,
    pub cells: Vec<Cell>,
    pub cov: Option<Vec<Vec<f64>>>,
    pub weighting: Option<gmm::Weighting>,
    pub j_stat: Option<f64>,
    pub j_df: Option<usize>,
    pub j_p_value: Option<f64>,
    /// Unpooled moment means per measurement (benchmark first).
    pub per_measurement: BTreeMap<String, Vec<f64>>,
    pub se_kind: String,
    pub notes: Vec<String>,
}

impl VariantReport {
    pub fn from_gmm(name: &str, measurements: &[String], est: &GmmEstimate) -> Self {
        VariantReport {
            name: name.to_string(),
            method: "nsi".into(),
            coefficients: est.coefficients.clone(),
            cells: est
                .beta_hat
                .iter()
                .zip(&est.se)
                .map(|(&b, &s)| Cell::new(b, s))
                .collect(),
            cov: Some(
                (0..est.cov.nrows())
                    .map(|i| est.cov.row(i).iter().cloned().collect())
                    .collect(),
            ),
            weighting: Some(est.weighting),
            j_stat: est.j_stat,
            j_df: est.j_stat.map(|_| est.j_df),
            j_p_value: est.j_p_value,
            per_measurement: measurements
                .iter()
                .cloned()
                .zip(est.per_measurement.iter().cloned())
                .collect(),
            se_kind: "asymptotic_gmm".into(),
            notes: Vec::new(),
        }
    }

    pub fn cell(&self, coefficient: &str) -> Option<&Cell> {
        self.coefficients
            .iter()
            .position(|c| c == coefficient)
            .map(|i| &self.cells[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub coefficient: String,
    /// Keyed by variant name.
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub path: Option<String>,
    pub n: usize,
    pub dropped: usize,
    pub roles: RoleDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantFailure {
    pub variant: String,
    pub error_kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub data: DataSummary,
    /// Treatment coefficients, one table row each.
    pub rows: Vec<String>,
    /// Estimator variants, one table column each.
    pub columns: Vec<String>,
    pub table: Vec<TableRow>,
    pub variants: Vec<VariantReport>,
    pub diagnostics: BTreeMap<String, DiagnosticsReport>,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }
}

pub fn build_table(rows: &[String], variants: &[VariantReport]) -> Vec<TableRow> {
    rows.iter()
        .map(|coef| TableRow {
            coefficient: coef.clone(),
            cells: variants
                .iter()
                .filter_map(|v| v.cell(coef).map(|c| (v.name.clone(), c.clone())))
                .collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeCurve {
    pub variant: String,
    pub measurement: String,
    pub instruments: Vec<String>,
    pub hyper: crate::bridge::HyperParams,
    pub beta: Vec<f64>,
    pub instrument_strength: f64,
    pub grid: Vec<f64>,
    pub phi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgesReport {
    pub schema_version: u32,
    pub bridges: Vec<BridgeCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub tau_a: f64,
    pub se_a: f64,
    pub tau_b: f64,
    pub se_b: f64,
    #[serde(flatten)]
    pub test: WaldTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub coefficient: String,
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

/// Wald equality tests for one coefficient across every variant present in
/// both reports.
pub fn compare_reports(
    a: &EstimateReport,
    b: &EstimateReport,
    coefficient: &str,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for va in &a.variants {
        let Some(vb) = b.variant(&va.name) else {
            continue;
        };
        let missing = |which: &str| {
            NsiError::Schema(format!(
                "coefficient '{coefficient}' absent from variant '{}' of report {which}",
                va.name
            ))
        };
        let ca = va.cell(coefficient).ok_or_else(|| missing("A"))?;
        let cb = vb.cell(coefficient).ok_or_else(|| missing("B"))?;
        let test = gmm::wald_equality(ca.estimate, ca.se, cb.estimate, cb.se)?;
        rows.push(ComparisonRow {
            variant: va.name.clone(),
            tau_a: ca.estimate,
            se_a: ca.se,
            tau_b: cb.estimate,
            se_b: cb.se,
            test,
        });
    }
    if rows.is_empty() {
        warnings.push("the reports share no estimator variant".into());
    }
    Ok(Comparison {
        schema_version: SCHEMA_VERSION,
        coefficient: coefficient.to_string(),
        rows,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub data: Option<DataSummary>,
    pub completeness: Option<CompletenessCheck>,
    pub variants: BTreeMap<String, DiagnosticsReport>,
    pub failures: Vec<VariantFailure>,
    pub warnings: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(variants: Vec<VariantReport>) -> EstimateReport {
        EstimateReport {
            schema_version: SCHEMA_VERSION,
            command: "estimate".into(),
            config: serde_json::Value::Null,
            data: DataSummary {
                path: None,
                n: 0,
                dropped: 0,
                roles: RoleDiagnostics {
                    n: 0,
                    dropped: 0,
                    columns: vec![],
                    treated_share: BTreeMap::new(),
                    warnings: vec![],
                },
            },
            rows: vec!["z".into()],
            columns: variants.iter().map(|v| v.name.clone()).collect(),
            table: build_table(&["z".into()], &variants),
            variants,
            diagnostics: BTreeMap::new(),
            warnings: vec![],
        }
    }

    fn variant(name: &str, est: f64, se: f64) -> VariantReport {
        VariantReport {
            name: name.into(),
            method: "nsi".into(),
            coefficients: vec!["z".into()],
            cells: vec![Cell::new(est, se)],
            cov: None,
            weighting: None,
            j_stat: None,
            j_df: None,
            j_p_value: None,
            per_measurement: BTreeMap::new(),
            se_kind: "asymptotic_gmm".into(),
            notes: vec![],
        }
    }

    #[test]
    fn identical_reports_have_no_gap() {
        let r = report(vec![variant("series", 0.4, 0.2), variant("wsi", 0.5, 0.1)]);
        let c = compare_reports(&r, &r, "z").unwrap();
        assert_eq!(c.rows.len(), 2);
        assert!(c
            .rows
            .iter()
            .all(|row| row.test.gap == 0.0 && row.test.p_value == 1.0));
    }

    #[test]
    fn constructed_gap() {
        let a = report(vec![variant("series", 3.0, 1.0)]);
        let b = report(vec![variant("series", 0.0, 1.0)]);
        let c = compare_reports(&a, &b, "z").unwrap();
        assert_eq!(c.rows[0].test.stat, 4.5);
    }

    #[test]
    fn disjoint_variants_warn() {
        let a = report(vec![variant("series", 3.0, 1.0)]);
        let b = report(vec![variant("kernel", 0.0, 1.0)]);
        let c = compare_reports(&a, &b, "z").unwrap();
        assert!(c.rows.is_empty());
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn missing_coefficient_is_schema_error() {
        let r = report(vec![variant("series", 3.0, 1.0)]);
        assert!(matches!(
            compare_reports(&r, &r, "w"),
            Err(NsiError::Schema(_))
        ));
    }

    #[test]
    fn report_round_trip() {
        let r = report(vec![variant("series", 0.25, 0.5)]);
        let bytes = to_json_bytes(&r).unwrap();
        let back: EstimateReport = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.table[0].cells["series"].estimate, 0.25);
    }
}
