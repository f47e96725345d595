//! Finite-dimensional dictionaries for bridge functions, critics and
//! debiasing nuisances: polynomial series, Gaussian-kernel Nyström features
//! and random-forest leaf indicators.

mod kernel;
mod polynomial;
mod tree;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{NsiError, Result};

pub use kernel::KernelState;
pub use polynomial::PolynomialState;
pub use tree::{ForestState, Node, Tree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Polynomial,
    KernelNystrom,
    TreeLeaf,
}

impl BasisKind {
    /// Column label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            BasisKind::Polynomial => "series",
            BasisKind::KernelNystrom => "kernel",
            BasisKind::TreeLeaf => "tree",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "series" | "polynomial" => Some(BasisKind::Polynomial),
            "kernel" | "kernel_nystrom" | "rkhs" => Some(BasisKind::KernelNystrom),
            "tree" | "tree_leaf" | "forest" => Some(BasisKind::TreeLeaf),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub degree: usize,
    /// Pairwise products across input columns (polynomial only).
    pub interactions: bool,
    pub n_centers: usize,
    /// Gaussian bandwidth; `None` selects the median pairwise center distance.
    pub bandwidth: Option<f64>,
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub include_intercept: bool,
    pub standardize: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            kind: BasisKind::Polynomial,
            degree: 3,
            interactions: false,
            n_centers: 50,
            bandwidth: None,
            n_trees: 10,
            max_depth: 3,
            min_leaf: 5,
            include_intercept: true,
            standardize: true,
        }
    }
}

impl BasisSpec {
    pub fn polynomial(degree: usize) -> Self {
        BasisSpec {
            kind: BasisKind::Polynomial,
            degree,
            ..Default::default()
        }
    }

    pub fn kernel(n_centers: usize) -> Self {
        BasisSpec {
            kind: BasisKind::KernelNystrom,
            n_centers,
            ..Default::default()
        }
    }

    pub fn tree(n_trees: usize, max_depth: usize) -> Self {
        BasisSpec {
            kind: BasisKind::TreeLeaf,
            n_trees,
            max_depth,
            ..Default::default()
        }
    }

    /// Default dictionary over a measurement for bridge functions.
    pub fn default_bridge(kind: BasisKind) -> Self {
        match kind {
            BasisKind::Polynomial => BasisSpec::polynomial(3),
            BasisKind::KernelNystrom => BasisSpec::kernel(50),
            BasisKind::TreeLeaf => BasisSpec::tree(10, 3),
        }
    }

    /// Default dictionary over the instruments for critics and projections.
    pub fn default_instrument(kind: BasisKind) -> Self {
        match kind {
            BasisKind::Polynomial => BasisSpec {
                interactions: true,
                ..BasisSpec::polynomial(2)
            },
            other => BasisSpec::default_bridge(other),
        }
    }

    pub fn with_intercept(mut self, on: bool) -> Self {
        self.include_intercept = on;
        self
    }

    pub fn with_standardize(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(NsiError::InvalidArgument(format!("basis spec: {what}")));
        match self.kind {
            BasisKind::Polynomial if self.degree < 1 => bad("degree must be >= 1"),
            BasisKind::KernelNystrom if self.n_centers < 1 => bad("n_centers must be >= 1"),
            BasisKind::KernelNystrom if self.bandwidth.is_some_and(|h| !(h > 0.0)) => {
                bad("bandwidth must be > 0")
            }
            BasisKind::TreeLeaf if self.n_trees < 1 => bad("n_trees must be >= 1"),
            BasisKind::TreeLeaf if self.max_depth < 1 => bad("max_depth must be >= 1"),
            BasisKind::TreeLeaf if self.min_leaf < 1 => bad("min_leaf must be >= 1"),
            _ => Ok(()),
        }
    }
}

/// Per-column centering and scaling learned on training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub(crate) fn fit(x: &DMatrix<f64>, names: &[String]) -> Result<Self> {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            let m = col.sum() / n;
            let v = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = v.sqrt();
            if !(sd > 1e-12 * m.abs().max(1.0)) {
                return Err(NsiError::Standardization {
                    column: names.get(j).cloned().unwrap_or_else(|| format!("x{j}")),
                });
            }
            means.push(m);
            scales.push(sd);
        }
        Ok(Standardizer { means, scales })
    }

    pub(crate) fn identity(d: usize) -> Self {
        Standardizer {
            means: vec![0.0; d],
            scales: vec![1.0; d],
        }
    }

    pub(crate) fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.means[j]) / self.scales[j]
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum FittedState {
    Polynomial(PolynomialState),
    KernelNystrom(KernelState),
    TreeLeaf(ForestState),
}

/// A dictionary fitted to training inputs; evaluation is pure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedBasis {
    pub spec: BasisSpec,
    pub input_names: Vec<String>,
    pub input_dim: usize,
    pub dimension: usize,
    pub state: FittedState,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Fits a dictionary with generic input names `x0, x1, ...`.
pub fn fit_basis(
    spec: &BasisSpec,
    inputs: &DMatrix<f64>,
    targets: Option<&[f64]>,
    seed: u64,
) -> Result<FittedBasis> {
    let names: Vec<String> = (0..inputs.ncols()).map(|j| format!("x{j}")).collect();
    fit_basis_named(spec, inputs, &names, targets, seed)
}

pub fn fit_basis_named(
    spec: &BasisSpec,
    inputs: &DMatrix<f64>,
    names: &[String],
    targets: Option<&[f64]>,
    seed: u64,
) -> Result<FittedBasis> {
    spec.validate()?;
    if inputs.nrows() == 0 || inputs.ncols() == 0 {
        return Err(NsiError::InsufficientData(
            "basis inputs must have at least one row and one column".into(),
        ));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(NsiError::Validation(
            "basis inputs contain non-finite values".into(),
        ));
    }
    let mut warnings = Vec::new();
    let state = match spec.kind {
        BasisKind::Polynomial => {
            FittedState::Polynomial(PolynomialState::fit(spec, inputs, names)?)
        }
        BasisKind::KernelNystrom => {
            FittedState::KernelNystrom(KernelState::fit(spec, inputs, names, seed, &mut warnings)?)
        }
        BasisKind::TreeLeaf => {
            let targets = targets.ok_or_else(|| {
                NsiError::InvalidArgument("tree_leaf basis requires a target vector".into())
            })?;
            if targets.len() != inputs.nrows() {
                return Err(NsiError::DimensionMismatch {
                    context: "tree basis targets".into(),
                    expected: inputs.nrows(),
                    actual: targets.len(),
                });
            }
            FittedState::TreeLeaf(ForestState::fit(spec, inputs, targets, seed))
        }
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let features = match &state {
        FittedState::Polynomial(s) => s.n_features(),
        FittedState::KernelNystrom(s) => s.n_features(),
        FittedState::TreeLeaf(s) => s.n_leaves(),
    };
    Ok(FittedBasis {
        spec: spec.clone(),
        input_names: names.to_vec(),
        input_dim: inputs.ncols(),
        dimension: features + usize::from(spec.include_intercept),
        state,
        warnings,
    })
}

impl FittedBasis {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// `m × p` design matrix; the intercept, when present, is column 0.
    pub fn evaluate(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.input_dim {
            return Err(NsiError::DimensionMismatch {
                context: "basis evaluation input columns".into(),
                expected: self.input_dim,
                actual: inputs.ncols(),
            });
        }
        let features = match &self.state {
            FittedState::Polynomial(s) => s.features(inputs),
            FittedState::KernelNystrom(s) => s.features(inputs),
            FittedState::TreeLeaf(s) => s.features(inputs),
        };
        if !self.spec.include_intercept {
            return Ok(features);
        }
        let m = inputs.nrows();
        let mut out = DMatrix::zeros(m, features.ncols() + 1);
        out.column_mut(0).fill(1.0);
        out.columns_mut(1, features.ncols()).copy_from(&features);
        Ok(out)
    }

    pub fn evaluate_vec(&self, values: &[f64]) -> Result<DMatrix<f64>> {
        self.evaluate(&DMatrix::from_column_slice(values.len(), 1, values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn polynomial_scalar_dimension() {
        let x = random_inputs(20, 1, 1);
        let b = fit_basis(&BasisSpec::polynomial(2), &x, None, 0).unwrap();
        assert_eq!(b.dimension(), 3);
    }

    #[test]
    fn polynomial_raw_monomials() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]);
        let spec = BasisSpec::polynomial(2).with_standardize(false);
        let b = fit_basis(&spec, &x, None, 0).unwrap();
        let f = b.evaluate_vec(&[2.0]).unwrap();
        assert_eq!(
            f.row(0).iter().cloned().collect::<Vec<_>>(),
            vec![1.0, 2.0, 4.0]
        );
    }

    #[test]
    fn polynomial_interactions_skip_binary_powers() {
        let mut x = random_inputs(40, 2, 3);
        for i in 0..40 {
            x[(i, 0)] = (i % 2) as f64;
        }
        let spec = BasisSpec {
            interactions: true,
            ..BasisSpec::polynomial(2)
        };
        let b = fit_basis(&spec, &x, None, 0).unwrap();
        // 1, z, x, x², z·x
        assert_eq!(b.dimension(), 5);
    }

    #[test]
    fn zero_variance_input_fails_standardization() {
        let x = DMatrix::from_element(10, 1, 2.0);
        let err = fit_basis(&BasisSpec::polynomial(2), &x, None, 0).unwrap_err();
        assert!(matches!(err, NsiError::Standardization { .. }));
    }

    #[test]
    fn kernel_centers_clipped() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.5]);
        let spec = BasisSpec::kernel(4).with_intercept(false);
        let b = fit_basis(&spec, &x, None, 7).unwrap();
        assert_eq!(b.dimension(), 3);
        assert!(!b.warnings.is_empty());
    }

    #[test]
    fn kernel_feature_at_center_is_one() {
        let x = random_inputs(30, 2, 9);
        let b = fit_basis(&BasisSpec::kernel(5), &x, None, 2).unwrap();
        let FittedState::KernelNystrom(state) = &b.state else {
            panic!()
        };
        let centers = state.centers_matrix();
        let raw = state.raw_kernel(&state.standardizer.apply(&x));
        // Every center is a training row, so its own raw feature equals 1.
        for (m, c) in centers.row_iter().enumerate() {
            let row = (0..x.nrows())
                .find(|&i| {
                    let s = state.standardizer.apply(&x.rows(i, 1).into_owned());
                    (s.row(0) - c).norm() < 1e-12
                })
                .unwrap();
            assert_relative_eq!(raw[(row, m)], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tree_requires_target() {
        let x = random_inputs(20, 1, 1);
        assert!(fit_basis(&BasisSpec::tree(2, 1), &x, None, 0).is_err());
    }

    #[test]
    fn tree_leaf_dimension_bound() {
        let x = random_inputs(50, 2, 4);
        let y: Vec<f64> = x.column(0).iter().map(|v| v * v).collect();
        let b = fit_basis(&BasisSpec::tree(2, 1), &x, Some(&y), 0).unwrap();
        assert!(b.dimension() <= 2 * 2 + 1);
    }

    #[test]
    fn dimension_mismatch_on_evaluate() {
        let x = random_inputs(20, 2, 1);
        let b = fit_basis(&BasisSpec::polynomial(2), &x, None, 0).unwrap();
        assert!(matches!(
            b.evaluate(&random_inputs(3, 1, 2)),
            Err(NsiError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn json_round_trip_preserves_evaluation() {
        let x = random_inputs(40, 2, 5);
        let y: Vec<f64> = x.column(1).iter().map(|v| v.sin()).collect();
        for spec in [
            BasisSpec::polynomial(3),
            BasisSpec::kernel(8),
            BasisSpec::tree(3, 2),
        ] {
            let b = fit_basis(&spec, &x, Some(&y), 3).unwrap();
            let text = serde_json::to_string(&b).unwrap();
            let back: FittedBasis = serde_json::from_str(&text).unwrap();
            assert_eq!(b.evaluate(&x).unwrap(), back.evaluate(&x).unwrap());
        }
    }

    proptest! {
        #[test]
        fn tree_rows_sum_to_tree_count(seed in 0u64..500, n_trees in 1usize..6, depth in 1usize..4) {
            let x = random_inputs(60, 2, seed);
            let y: Vec<f64> = x.row_iter().map(|r| r[0] - 2.0 * r[1] * r[1]).collect();
            let spec = BasisSpec::tree(n_trees, depth).with_intercept(false);
            let b = fit_basis(&spec, &x, Some(&y), seed).unwrap();
            let f = b.evaluate(&random_inputs(25, 2, seed + 1)).unwrap();
            for row in f.row_iter() {
                prop_assert_eq!(row.sum(), n_trees as f64);
            }
        }

        #[test]
        fn polynomial_standardized_columns_centered(seed in 0u64..500, degree in 1usize..5) {
            let x = random_inputs(50, 2, seed);
            let spec = BasisSpec { interactions: true, ..BasisSpec::polynomial(degree) };
            let b = fit_basis(&spec, &x, None, 0).unwrap();
            let f = b.evaluate(&x).unwrap();
            for j in 1..f.ncols() {
                prop_assert!(f.column(j).mean().abs() < 1e-10);
            }
        }

        #[test]
        fn fitting_is_deterministic(seed in 0u64..200) {
            let x = random_inputs(30, 2, seed);
            let y: Vec<f64> = x.column(0).iter().cloned().collect();
            for spec in [BasisSpec::polynomial(2), BasisSpec::kernel(6), BasisSpec::tree(3, 2)] {
                let a = fit_basis(&spec, &x, Some(&y), seed).unwrap();
                let b = fit_basis(&spec, &x, Some(&y), seed).unwrap();
                prop_assert_eq!(a.evaluate(&x).unwrap(), b.evaluate(&x).unwrap());
            }
        }
    }
}
