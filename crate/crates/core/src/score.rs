//! Cross-fitted Neyman-orthogonal scores.
//!
//! For a held-out unit `i` in fold `k`, measurement `j` and coefficient `ℓ`:
//!
//! ```text
//! ψ_ijℓ = α̂_iℓ · φ̂_j(Y_ij) + q̂_jℓ(W_i) · (Y_i1 − φ̂_j(Y_ij))
//! ψ_i1ℓ = α̂_iℓ · Y_i1
//! ```
//!
//! with every nuisance (φ̂, ξ̂, q̂, M̂) fitted on the complement of fold `k`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::bridge::{fit_bridge_minimax, fit_nuisance, HyperSpec};
use crate::data::{Dataset, FoldAssignment};
use crate::diagnostics;
use crate::error::{NsiError, Result};
use crate::linalg;

/// Horvitz–Thompson transform `s(z) = z/π − (1 − z)/(1 − π)`.
pub fn ht_transform(z: &[f64], pi: f64) -> Result<Vec<f64>> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(NsiError::InvalidArgument(format!(
            "treatment probability must lie in (0, 1), got {pi}"
        )));
    }
    Ok(z.iter()
        .map(|&zi| zi / pi - (1.0 - zi) / (1.0 - pi))
        .collect())
}

/// The linear functional(s) of the bridge being estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RieszTarget {
    /// Average latent treatment effect of one binary treatment; one moment
    /// per measurement with Riesz weight `s(Z)`.
    HtContrast { treatment: String },
    /// Coefficients of the best linear predictor of the bridged outcome on
    /// `(1, regressors…)`.
    Regression { regressors: Vec<String> },
}

pub const INTERCEPT: &str = "(intercept)";

impl RieszTarget {
    pub fn coefficient_names(&self) -> Vec<String> {
        match self {
            RieszTarget::HtContrast { treatment } => vec![treatment.clone()],
            RieszTarget::Regression { regressors } => std::iter::once(INTERCEPT.to_string())
                .chain(regressors.iter().cloned())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            RieszTarget::HtContrast { .. } => 1,
            RieszTarget::Regression { regressors } => regressors.len() + 1,
        }
    }

    /// HT contrast for a single treatment without covariates, otherwise the
    /// regression on `(1, treatments, covariates)`.
    pub fn default_for(ds: &Dataset) -> Result<Self> {
        let roles = ds.roles();
        match (roles.treatments.as_slice(), roles.covariates.is_empty()) {
            ([], _) => Err(NsiError::Role("no treatment column configured".into())),
            ([t], true) => Ok(RieszTarget::HtContrast {
                treatment: t.clone(),
            }),
            (ts, _) => Ok(RieszTarget::Regression {
                regressors: ts.iter().chain(&roles.covariates).cloned().collect(),
            }),
        }
    }
}

/// Riesz representers `α̂_ℓ(R) = e_ℓᵀ M̂⁻¹ R` evaluated on a set of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RieszWeights {
    pub coefficients: Vec<String>,
    /// Design rows `R_i` of the evaluation rows.
    pub r_design: DMatrix<f64>,
    /// Training Gram `Ê[RRᵀ]` (regression targets only).
    pub m_hat: Option<DMatrix<f64>>,
    /// `n_eval × d_R`.
    pub alpha: DMatrix<f64>,
    /// Treatment probability used by an HT contrast.
    pub pi: Option<f64>,
}

fn design(ds: &Dataset, regressors: &[String]) -> Result<DMatrix<f64>> {
    let x = ds.matrix(regressors)?;
    let mut r = DMatrix::from_element(ds.n(), regressors.len() + 1, 1.0);
    r.columns_mut(1, regressors.len()).copy_from(&x);
    Ok(r)
}

/// Columns that add no rank when appended in order.
fn collinear_columns(m: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let scale = m
        .diagonal()
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut rank = 0;
    let mut bad = Vec::new();
    for k in 0..m.nrows() {
        let sub = m.view((0, 0), (k + 1, k + 1)).into_owned();
        let eig = sub.symmetric_eigenvalues();
        let r = eig.iter().filter(|&&l| l > 1e-10 * scale).count();
        if r == rank {
            bad.push(names[k].clone());
        } else {
            rank = r;
        }
    }
    bad
}

pub fn compute_riesz_weights(
    train: &Dataset,
    eval: &Dataset,
    target: &RieszTarget,
    design_pi: Option<f64>,
) -> Result<RieszWeights> {
    match target {
        RieszTarget::HtContrast { treatment } => {
            let pi = match design_pi {
                Some(p) => p,
                None => linalg::mean(train.column(treatment)?),
            };
            if !(pi > 0.0 && pi < 1.0) {
                return Err(NsiError::DegenerateData(format!(
                    "treatment '{treatment}' has a single arm in the training rows"
                )));
            }
            let z = eval.column(treatment)?;
            let s = ht_transform(z, pi)?;
            Ok(RieszWeights {
                coefficients: target.coefficient_names(),
                r_design: DMatrix::from_column_slice(z.len(), 1, z),
                m_hat: None,
                alpha: DMatrix::from_column_slice(s.len(), 1, &s),
                pi: Some(pi),
            })
        }
        RieszTarget::Regression { regressors } => {
            let names = target.coefficient_names();
            let r_train = design(train, regressors)?;
            let m_hat = linalg::gram(&r_train);
            let bad = collinear_columns(&m_hat, &names);
            if !bad.is_empty() {
                return Err(NsiError::Rank { columns: bad });
            }
            let chol = m_hat.clone().cholesky().ok_or_else(|| NsiError::Rank {
                columns: names.clone(),
            })?;
            let r_eval = design(eval, regressors)?;
            let alpha = chol.solve(&r_eval.transpose()).transpose();
            Ok(RieszWeights {
                coefficients: names,
                r_design: r_eval,
                m_hat: Some(m_hat),
                alpha,
                pi: None,
            })
        }
    }
}

/// Cross-fitted scores, one `n × d_R` block per measurement (benchmark first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub measurements: Vec<String>,
    pub coefficients: Vec<String>,
    pub psi: Vec<DMatrix<f64>>,
    pub folds: FoldAssignment,
    /// HT treatment probability used in each fold, when applicable.
    pub pi: Vec<Option<f64>>,
}

impl ScoreMatrix {
    pub fn n(&self) -> usize {
        self.psi.first().map_or(0, |m| m.nrows())
    }

    pub fn n_measurements(&self) -> usize {
        self.psi.len()
    }

    pub fn d_r(&self) -> usize {
        self.coefficients.len()
    }

    /// `n × (J·d_R)` matrix with measurement blocks side by side.
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.n();
        let d = self.d_r();
        let mut out = DMatrix::zeros(n, self.psi.len() * d);
        for (j, block) in self.psi.iter().enumerate() {
            out.columns_mut(j * d, d).copy_from(block);
        }
        out
    }

    pub fn column_names(&self) -> Vec<String> {
        self.measurements
            .iter()
            .flat_map(|m| {
                self.coefficients
                    .iter()
                    .map(move |c| format!("psi_{m}_{c}"))
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| NsiError::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_csv_to(&mut out, None)
            .and_then(|_| out.flush().map_err(|e| NsiError::io(path, e)))
    }

    /// Writes the score table; `prefix` labels every ψ column.
    pub fn write_csv_to(&self, out: &mut impl Write, prefix: Option<&str>) -> Result<()> {
        let io = |e| NsiError::io("<scores>", e);
        let names = self.column_names();
        let header: Vec<String> = names
            .iter()
            .map(|c| prefix.map_or_else(|| c.clone(), |p| format!("{p}.{c}")))
            .collect();
        writeln!(out, "unit,fold,{}", header.join(",")).map_err(io)?;
        let stacked = self.stacked();
        for i in 0..self.n() {
            let vals: Vec<String> = stacked.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{}", i, self.folds.fold_of[i], vals.join(",")).map_err(io)?;
        }
        Ok(())
    }
}

/// Settings shared by every measurement's first stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossFitSpec {
    pub target: RieszTarget,
    pub phi_basis: BasisSpec,
    pub w_basis: BasisSpec,
    pub hyper: HyperSpec,
    pub design_pi: Option<f64>,
    pub seed: u64,
}

/// Per fold and measurement first-stage diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldFitSummary {
    pub fold: usize,
    pub measurement: String,
    pub instrument_strength: f64,
    /// max over coefficients and dictionary elements of |Ê_heldout[(α̂ − q̂) b_k]|.
    pub orthogonality_residual: f64,
    pub xi_objective: Vec<f64>,
    pub bridge_foc_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossFit {
    pub scores: ScoreMatrix,
    pub fits: Vec<FoldFitSummary>,
}

struct FoldOutput {
    rows: Vec<usize>,
    psi: Vec<DMatrix<f64>>,
    pi: Option<f64>,
    fits: Vec<FoldFitSummary>,
}

fn fit_fold(
    ds: &Dataset,
    folds: &FoldAssignment,
    spec: &CrossFitSpec,
    k: usize,
) -> Result<FoldOutput> {
    let held = folds.held_out(k);
    let train = ds.subset(&folds.training(k));
    let eval = ds.subset(&held);
    let riesz_train = compute_riesz_weights(&train, &train, &spec.target, spec.design_pi)?;
    let riesz_eval = compute_riesz_weights(&train, &eval, &spec.target, spec.design_pi)?;
    let d_r = spec.target.dim();
    let y1 = DVector::from_column_slice(eval.benchmark());
    let mut psi = Vec::with_capacity(ds.roles().measurements.len() + 1);
    let mut bench = riesz_eval.alpha.clone();
    for mut col in bench.column_iter_mut() {
        col.component_mul_assign(&y1);
    }
    psi.push(bench);
    let mut fits = Vec::new();
    for (jdx, m) in ds.roles().measurements.iter().enumerate() {
        let label = |e: NsiError| e.in_fit(k, m);
        let seed = spec
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((k as u64) << 16 | jdx as u64);
        let bridge =
            fit_bridge_minimax(&train, m, &spec.phi_basis, &spec.w_basis, &spec.hyper, seed)
                .map_err(label)?;
        let phi = DVector::from_vec(bridge.apply(eval.column(m)?).map_err(label)?);
        let resid = &y1 - &phi;
        let mut block = DMatrix::zeros(eval.n(), d_r);
        let mut xi_objective = Vec::with_capacity(d_r);
        let mut orth = 0.0_f64;
        for l in 0..d_r {
            let alpha_train: Vec<f64> = riesz_train.alpha.column(l).iter().cloned().collect();
            let nuisance = fit_nuisance(&train, &bridge, &alpha_train).map_err(label)?;
            let q = DVector::from_vec(nuisance.q_values(&bridge, &eval).map_err(label)?);
            let alpha = riesz_eval.alpha.column(l);
            let col = alpha.component_mul(&phi) + q.component_mul(&resid);
            block.set_column(l, &col);
            xi_objective.push(nuisance.xi_objective);
            let alpha_eval: Vec<f64> = alpha.iter().cloned().collect();
            orth = orth.max(
                diagnostics::orthogonality_residual(&eval, &bridge, &nuisance, &alpha_eval)
                    .map_err(label)?,
            );
        }
        fits.push(FoldFitSummary {
            fold: k,
            measurement: m.clone(),
            instrument_strength: diagnostics::instrument_strength(&bridge).map_err(label)?,
            orthogonality_residual: orth,
            xi_objective,
            bridge_foc_residual: bridge.foc_residual().map_err(label)?,
        });
        psi.push(block);
    }
    Ok(FoldOutput {
        rows: held,
        psi,
        pi: riesz_eval.pi,
        fits,
    })
}

/// Cross-fitted score matrix for the benchmark and every auxiliary measurement.
pub fn crossfit_scores(
    ds: &Dataset,
    folds: &FoldAssignment,
    spec: &CrossFitSpec,
) -> Result<CrossFit> {
    if folds.fold_of.len() != ds.n() {
        return Err(NsiError::DimensionMismatch {
            context: "fold assignment".into(),
            expected: ds.n(),
            actual: folds.fold_of.len(),
        });
    }
    let outputs = (0..folds.k)
        .into_par_iter()
        .map(|k| fit_fold(ds, folds, spec, k))
        .collect::<Result<Vec<_>>>()?;
    let d_r = spec.target.dim();
    let n_meas = ds.roles().measurements.len() + 1;
    let mut psi = vec![DMatrix::zeros(ds.n(), d_r); n_meas];
    let mut pi = Vec::with_capacity(folds.k);
    let mut fits = Vec::new();
    for out in outputs {
        for (j, block) in out.psi.iter().enumerate() {
            for (r, &i) in out.rows.iter().enumerate() {
                psi[j].set_row(i, &block.row(r));
            }
        }
        pi.push(out.pi);
        fits.extend(out.fits);
    }
    if psi.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(NsiError::Numerical("non-finite cross-fitted score".into()));
    }
    let measurements = std::iter::once(ds.roles().benchmark.clone())
        .chain(ds.roles().measurements.iter().cloned())
        .collect();
    Ok(CrossFit {
        scores: ScoreMatrix {
            measurements,
            coefficients: spec.target.coefficient_names(),
            psi,
            folds: folds.clone(),
            pi,
        },
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_folds, ColumnRoles};
    use approx::assert_relative_eq;

    #[test]
    fn ht_values() {
        assert_eq!(ht_transform(&[1.0, 0.0], 0.5).unwrap(), vec![2.0, -2.0]);
        let s = ht_transform(&[1.0, 0.0], 0.25).unwrap();
        assert_relative_eq!(s[0], 4.0);
        assert_relative_eq!(s[1], -4.0 / 3.0);
        assert_eq!(linalg::mean(&ht_transform(&[1.0, 0.0], 0.5).unwrap()), 0.0);
        assert!(ht_transform(&[1.0], 1.0).is_err());
        assert!(ht_transform(&[1.0], 0.0).is_err());
    }

    fn toy(n: usize) -> Dataset {
        toy_with(n, &["x"])
    }

    fn toy_with(n: usize, covariates: &[&str]) -> Dataset {
        let z: Vec<f64> = (0..n).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let y1: Vec<f64> = (0..n)
            .map(|i| z[i] + x[i] + (i as f64 * 1.3).cos())
            .collect();
        let y2: Vec<f64> = y1.iter().map(|v| 2.0 * v + 0.1).collect();
        let roles = ColumnRoles::new("y1")
            .with_measurements(&["y2"])
            .with_treatments(&["z"])
            .with_covariates(covariates);
        Dataset::from_columns(
            vec![
                "y1".into(),
                "y2".into(),
                "z".into(),
                "x".into(),
                "x2".into(),
            ],
            vec![y1, y2, z, x.clone(), x],
            roles,
        )
        .unwrap()
    }

    #[test]
    fn riesz_intercept_only_is_one() {
        let ds = toy(30);
        let t = RieszTarget::Regression { regressors: vec![] };
        let w = compute_riesz_weights(&ds, &ds, &t, None).unwrap();
        assert!(w.alpha.iter().all(|&a| (a - 1.0).abs() < 1e-14));
    }

    #[test]
    fn riesz_treatment_matches_ht() {
        // M = ((1, π), (π, π)) ⇒ e₂ᵀM⁻¹(1, z) = (z − π)/(π(1 − π)).
        let ds = toy(31);
        let t = RieszTarget::Regression {
            regressors: vec!["z".into()],
        };
        let w = compute_riesz_weights(&ds, &ds, &t, None).unwrap();
        let z = ds.column("z").unwrap();
        let pi = linalg::mean(z);
        for (i, &zi) in z.iter().enumerate() {
            let by_hand = (zi - pi) / (pi * (1.0 - pi));
            assert_relative_eq!(w.alpha[(i, 1)], by_hand, epsilon = 1e-10);
        }
        // Ê[R αᵀ] = I on the training rows.
        let id = w.r_design.tr_mul(&w.alpha) / ds.n() as f64;
        assert_relative_eq!(id, DMatrix::identity(2, 2), epsilon = 1e-8);
    }

    #[test]
    fn duplicated_covariate_rank_error() {
        let ds = toy_with(30, &["x", "x2"]);
        let t = RieszTarget::Regression {
            regressors: vec!["z".into(), "x".into(), "x2".into()],
        };
        match compute_riesz_weights(&ds, &ds, &t, None) {
            Err(NsiError::Rank { columns }) => assert_eq!(columns, vec!["x2".to_string()]),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn benchmark_scores_are_ht_products() {
        let ds = toy(60);
        let folds = assign_folds(60, 3, 1).unwrap();
        let spec = CrossFitSpec {
            target: RieszTarget::HtContrast {
                treatment: "z".into(),
            },
            phi_basis: BasisSpec::polynomial(1),
            w_basis: BasisSpec::polynomial(1),
            hyper: HyperSpec::default(),
            design_pi: Some(0.5),
            seed: 0,
        };
        let cf = crossfit_scores(&ds, &folds, &spec).unwrap();
        let z = ds.column("z").unwrap();
        let s = ht_transform(z, 0.5).unwrap();
        for i in 0..60 {
            assert_relative_eq!(cf.scores.psi[0][(i, 0)], s[i] * ds.benchmark()[i]);
        }
        assert_eq!(cf.scores.measurements, vec!["y1", "y2"]);
        assert_eq!(cf.fits.len(), 3);
    }

    #[test]
    fn score_csv_header() {
        let ds = toy(40);
        let folds = assign_folds(40, 2, 3).unwrap();
        let spec = CrossFitSpec {
            target: RieszTarget::default_for(&ds).unwrap(),
            phi_basis: BasisSpec::polynomial(1),
            w_basis: BasisSpec::polynomial(1),
            hyper: HyperSpec::default(),
            design_pi: None,
            seed: 0,
        };
        let cf = crossfit_scores(&ds, &folds, &spec).unwrap();
        let mut buf = Vec::new();
        cf.scores.write_csv_to(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "unit,fold,psi_y1_(intercept),psi_y1_z,psi_y1_x,psi_y2_(intercept),psi_y2_z,psi_y2_x"
        );
        assert_eq!(text.lines().count(), 41);
    }
}
