//! Column-oriented datasets, role assignment, CSV ingestion and fold splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NsiError, Result};
use crate::linalg;

/// Which column plays which part in the measurement model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    /// The benchmark measurement anchoring the latent scale.
    pub benchmark: String,
    /// Auxiliary measurements, in order.
    #[serde(default)]
    pub measurements: Vec<String>,
    /// Binary treatment indicators.
    #[serde(default)]
    pub treatments: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Explicit instrument list. Empty means the default: treatments,
    /// covariates and every other auxiliary measurement.
    #[serde(default)]
    pub instruments: Vec<String>,
}

impl ColumnRoles {
    pub fn new(benchmark: impl Into<String>) -> Self {
        ColumnRoles {
            benchmark: benchmark.into(),
            ..Default::default()
        }
    }

    pub fn with_measurements<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.measurements = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn with_treatments<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.treatments = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn with_covariates<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.covariates = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn with_instruments<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.instruments = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    /// Every column referenced by some role, without duplicates, in role order.
    pub fn all_columns(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let iter = std::iter::once(&self.benchmark)
            .chain(&self.measurements)
            .chain(&self.treatments)
            .chain(&self.covariates)
            .chain(&self.instruments);
        for name in iter {
            if seen.insert(name.clone()) {
                out.push(name.clone());
            }
        }
        out
    }

    /// Instruments used when bridging `measurement`; never contains the
    /// measurement itself or the benchmark.
    pub fn instruments_for(&self, measurement: &str) -> Vec<String> {
        let base: Vec<&String> = if self.instruments.is_empty() {
            self.treatments
                .iter()
                .chain(&self.covariates)
                .chain(&self.measurements)
                .collect()
        } else {
            self.instruments.iter().collect()
        };
        let mut seen = BTreeSet::new();
        base.into_iter()
            .filter(|name| name.as_str() != measurement && **name != self.benchmark)
            .filter(|name| seen.insert((*name).clone()))
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.benchmark.is_empty() {
            return Err(NsiError::Role("benchmark column not set".into()));
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        owner.insert(&self.benchmark, "benchmark");
        let groups: [(&str, &Vec<String>); 3] = [
            ("measurements", &self.measurements),
            ("treatments", &self.treatments),
            ("covariates", &self.covariates),
        ];
        for (role, names) in groups {
            for name in names {
                if let Some(prev) = owner.insert(name, role) {
                    return Err(NsiError::Role(format!(
                        "column '{name}' assigned to both {prev} and {role}"
                    )));
                }
            }
        }
        if self.instruments.contains(&self.benchmark) {
            return Err(NsiError::Role(format!(
                "benchmark '{}' cannot be an instrument",
                self.benchmark
            )));
        }
        for m in &self.measurements {
            if self.instruments_for(m).is_empty() {
                return Err(NsiError::Role(format!(
                    "no instruments available for measurement '{m}'"
                )));
            }
        }
        Ok(())
    }
}

/// Immutable, validated table of `n` units.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    roles: ColumnRoles,
    dropped: usize,
}

impl Dataset {
    /// Builds a dataset from in-memory columns. Rows with a non-finite value in
    /// any role column are dropped and counted.
    pub fn from_columns(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        roles: ColumnRoles,
    ) -> Result<Self> {
        roles.validate()?;
        if names.len() != columns.len() {
            return Err(NsiError::DimensionMismatch {
                context: "column names".into(),
                expected: columns.len(),
                actual: names.len(),
            });
        }
        let len = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().position(|c| c.len() != len) {
            return Err(NsiError::DimensionMismatch {
                context: format!("column '{}'", names[bad]),
                expected: len,
                actual: columns[bad].len(),
            });
        }
        let wanted = roles.all_columns();
        let mut picked = Vec::with_capacity(wanted.len());
        for name in &wanted {
            let idx = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| NsiError::Role(format!("column '{name}' not found")))?;
            picked.push(idx);
        }
        let keep: Vec<usize> = (0..len)
            .filter(|&i| picked.iter().all(|&c| columns[c][i].is_finite()))
            .collect();
        let dropped = len - keep.len();
        let cols: Vec<Vec<f64>> = picked
            .iter()
            .map(|&c| keep.iter().map(|&i| columns[c][i]).collect())
            .collect();
        Self::finish(wanted, cols, roles, dropped)
    }

    fn finish(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        roles: ColumnRoles,
        dropped: usize,
    ) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if n < 2 {
            return Err(NsiError::DegenerateData(format!(
                "need at least 2 complete rows, found {n}"
            )));
        }
        let ds = Dataset {
            names,
            columns,
            roles,
            dropped,
        };
        for t in &ds.roles.treatments {
            let col = ds.column(t)?;
            if let Some(v) = col.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(NsiError::Validation(format!(
                    "treatment column '{t}' contains non-binary value {v}"
                )));
            }
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.columns[0].len()
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn roles(&self) -> &ColumnRoles {
        &self.roles
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| NsiError::Role(format!("column '{name}' not in dataset")))
    }

    pub fn benchmark(&self) -> &[f64] {
        self.column(&self.roles.benchmark)
            .expect("benchmark validated at construction")
    }

    /// `n × len(names)` matrix of the named columns.
    pub fn matrix<S: AsRef<str>>(&self, names: &[S]) -> Result<DMatrix<f64>> {
        let cols = names
            .iter()
            .map(|s| self.column(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(self.n(), cols.len(), |i, j| cols[j][i]))
    }

    /// Rows `rows` as a new dataset with the same roles.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&i| c[i]).collect())
            .collect();
        Dataset {
            names: self.names.clone(),
            columns,
            roles: self.roles.clone(),
            dropped: 0,
        }
    }

    /// Same data with different role assignment.
    pub fn with_roles(&self, roles: ColumnRoles) -> Result<Dataset> {
        Dataset::from_columns(self.names.clone(), self.columns.clone(), roles)
    }
}

/// Reads an RFC-4180 CSV with a header row. Empty fields and `NA`/`NaN`
/// count as missing; rows missing any role column are dropped.
pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
    let path = path.as_ref();
    roles.validate()?;
    let file = std::fs::File::open(path).map_err(|e| NsiError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let wanted = roles.all_columns();
    let mut index = Vec::with_capacity(wanted.len());
    for name in &wanted {
        let i = header.iter().position(|h| h == name).ok_or_else(|| {
            NsiError::Role(format!("column '{name}' not found in {}", path.display()))
        })?;
        index.push(i);
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    let mut dropped = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(index.len());
        let mut missing = false;
        for (&i, name) in index.iter().zip(&wanted) {
            let raw = record.get(i).unwrap_or("");
            match parse_cell(raw) {
                Some(v) => row.push(v),
                None if is_missing(raw) => {
                    missing = true;
                    break;
                }
                None => {
                    return Err(NsiError::Validation(format!(
                        "row {}: column '{name}' has non-numeric value '{raw}'",
                        line + 2
                    )))
                }
            }
        }
        if missing {
            dropped += 1;
            continue;
        }
        for (col, v) in columns.iter_mut().zip(row) {
            col.push(v);
        }
    }
    if dropped > 0 {
        log::info!(
            "{}: dropped {dropped} rows with missing role values",
            path.display()
        );
    }
    Dataset::finish(wanted, columns, roles.clone(), dropped)
}

fn is_missing(raw: &str) -> bool {
    matches!(raw, "" | "NA" | "NaN" | "nan" | "na")
}

fn parse_cell(raw: &str) -> Option<f64> {
    if is_missing(raw) {
        return None;
    }
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Partition of `0..n` into `k` folds of near-equal size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// Zero-based fold index of each unit.
    pub fold_of: Vec<usize>,
    pub k: usize,
}

impl FoldAssignment {
    pub fn held_out(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(NsiError::InvalidArgument(format!(
            "fold count must be at least 2, got {k}"
        )));
    }
    if n < 2 * k {
        return Err(NsiError::InsufficientData(format!(
            "{n} units cannot fill {k} folds of at least 2"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0; n];
    for (pos, &unit) in order.iter().enumerate() {
        fold_of[unit] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ColumnSummary {
    pub name: String,
    pub role: String,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RoleDiagnostics {
    pub n: usize,
    pub dropped: usize,
    pub columns: Vec<ColumnSummary>,
    /// Treated share per treatment column.
    pub treated_share: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Per-role summary statistics; never fails, problems become warnings.
pub fn validate_roles(ds: &Dataset) -> RoleDiagnostics {
    let roles = ds.roles();
    let mut columns = Vec::new();
    let mut warnings = Vec::new();
    let mut push = |name: &str, role: &str| {
        let col = ds.column(name).expect("role columns present");
        let variance = linalg::variance(col, 1);
        if variance <= 0.0 || !variance.is_finite() {
            warnings.push(format!("{role} column '{name}' has zero variance"));
        }
        columns.push(ColumnSummary {
            name: name.to_string(),
            role: role.to_string(),
            mean: linalg::mean(col),
            variance,
        });
    };
    push(&roles.benchmark, "benchmark");
    for m in &roles.measurements {
        push(m, "measurement");
    }
    for t in &roles.treatments {
        push(t, "treatment");
    }
    for x in &roles.covariates {
        push(x, "covariate");
    }
    let treated_share = roles
        .treatments
        .iter()
        .map(|t| (t.clone(), linalg::mean(ds.column(t).expect("present"))))
        .collect();
    RoleDiagnostics {
        n: ds.n(),
        dropped: ds.dropped(),
        columns,
        treated_share,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn roles() -> ColumnRoles {
        ColumnRoles::new("y1")
            .with_measurements(&["y2"])
            .with_treatments(&["z"])
    }

    #[test]
    fn loads_small_csv() {
        let f = csv_file("y1,y2,z\n1,2,0\n2,4,1\n3,6,0\n4,8,1\n");
        let ds = load_csv(f.path(), &roles()).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.dropped(), 0);
        assert_eq!(ds.column("y2").unwrap(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn non_binary_treatment_rejected() {
        let f = csv_file("y1,y2,z\n1,2,0\n2,4,2\n3,6,0\n4,8,1\n");
        assert!(matches!(
            load_csv(f.path(), &roles()),
            Err(NsiError::Validation(_))
        ));
    }

    #[test]
    fn missing_value_row_dropped() {
        let f = csv_file("y1,y2,z\n1,2,0\n2,,1\n3,6,0\n4,8,1\n");
        let ds = load_csv(f.path(), &roles()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.dropped(), 1);
    }

    #[test]
    fn missing_column_is_role_error() {
        let f = csv_file("y1,z\n1,0\n2,1\n");
        assert!(matches!(
            load_csv(f.path(), &roles()),
            Err(NsiError::Role(_))
        ));
    }

    #[test]
    fn single_row_is_degenerate() {
        let f = csv_file("y1,y2,z\n1,2,0\n");
        assert!(matches!(
            load_csv(f.path(), &roles()),
            Err(NsiError::DegenerateData(_))
        ));
    }

    #[test]
    fn loading_twice_is_identical() {
        let f = csv_file("y1,y2,z\n1.5,2.25,0\n2,4,1\n3,6e-3,0\n");
        assert_eq!(
            load_csv(f.path(), &roles()).unwrap(),
            load_csv(f.path(), &roles()).unwrap()
        );
    }

    #[test]
    fn benchmark_cannot_be_measurement() {
        let r = ColumnRoles::new("y1").with_measurements(&["y1"]);
        assert!(matches!(r.validate(), Err(NsiError::Role(_))));
    }

    #[test]
    fn default_instruments_exclude_bridged_measurement() {
        let r = ColumnRoles::new("y1")
            .with_measurements(&["y2", "y3"])
            .with_treatments(&["z"])
            .with_covariates(&["x"]);
        assert_eq!(r.instruments_for("y2"), vec!["z", "x", "y3"]);
        assert_eq!(r.instruments_for("y3"), vec!["z", "x", "y2"]);
    }

    #[test]
    fn measurement_without_instruments_rejected() {
        let r = ColumnRoles::new("y1").with_measurements(&["y2"]);
        assert!(matches!(r.validate(), Err(NsiError::Role(_))));
    }

    #[test]
    fn folds_balanced() {
        let f = assign_folds(10, 5, 1).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
        let mut s = assign_folds(11, 5, 1).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert!(matches!(
            assign_folds(8, 5, 1),
            Err(NsiError::InsufficientData(_))
        ));
    }

    #[test]
    fn role_diagnostics() {
        let n = 100;
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let z2: Vec<f64> = (0..n).map(|i| (i % 4 == 0) as u8 as f64).collect();
        let y1: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y2 = vec![3.0; n];
        let roles = ColumnRoles::new("y1")
            .with_measurements(&["y2"])
            .with_treatments(&["z", "z2"]);
        let ds = Dataset::from_columns(
            vec!["y1".into(), "y2".into(), "z".into(), "z2".into()],
            vec![y1, y2, z, z2],
            roles,
        )
        .unwrap();
        let d = validate_roles(&ds);
        assert_eq!(d.treated_share["z"], 0.5);
        assert_eq!(d.treated_share.len(), 2);
        assert!(d.warnings.iter().any(|w| w.contains("'y2'")));
    }

    proptest! {
        #[test]
        fn folds_partition_exactly(n in 4usize..300, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(n >= 2 * k);
            let f = assign_folds(n, k, seed).unwrap();
            prop_assert_eq!(f.fold_of.len(), n);
            let sizes = f.sizes();
            let lo = *sizes.iter().min().unwrap();
            let hi = *sizes.iter().max().unwrap();
            prop_assert!(hi - lo <= 1);
            let mut all: Vec<usize> = (0..k).flat_map(|j| f.held_out(j)).collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(f, assign_folds(n, k, seed).unwrap());
        }
    }
}
