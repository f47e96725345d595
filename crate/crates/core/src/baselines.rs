//! Index baselines: first principal component, inverse-covariance weighting
//! and the linearly scaled index, each followed by an HT contrast.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{NsiError, Result};
use crate::linalg;
use crate::score::{compute_riesz_weights, ht_transform, RieszTarget};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Pca,
    Icw,
    Wsi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexFit {
    pub kind: IndexKind,
    pub weights: Vec<f64>,
    /// Estimated scale factors relative to the benchmark (scaled index only).
    pub lambdas: Option<Vec<f64>>,
    pub index_values: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaScale {
    #[default]
    Correlation,
    Covariance,
}

fn check_columns(y: &DMatrix<f64>, min_cols: usize) -> Result<()> {
    if y.ncols() < min_cols {
        return Err(NsiError::InvalidArgument(format!(
            "index needs at least {min_cols} measurement column(s), got {}",
            y.ncols()
        )));
    }
    if y.nrows() < 2 {
        return Err(NsiError::InsufficientData(
            "index needs at least 2 rows".into(),
        ));
    }
    Ok(())
}

fn column_moments(y: &DMatrix<f64>, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    (0..y.ncols())
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|&i| y[(i, j)]).collect();
            (linalg::mean(&col), linalg::variance(&col, 1).sqrt())
        })
        .unzip()
}

fn standardize_with(
    y: &DMatrix<f64>,
    means: &[f64],
    sds: &[f64],
    what: &str,
) -> Result<DMatrix<f64>> {
    for (j, &sd) in sds.iter().enumerate() {
        if !(sd > 0.0) {
            return Err(NsiError::Standardization {
                column: format!("{what} column {j}"),
            });
        }
    }
    Ok(DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
        (y[(i, j)] - means[j]) / sds[j]
    }))
}

fn centered(y: &DMatrix<f64>) -> DMatrix<f64> {
    let means = y.row_mean();
    let mut out = y.clone();
    for mut row in out.row_iter_mut() {
        row -= &means;
    }
    out
}

/// Unit-norm leading eigenvector; within a tied leading eigenspace the
/// projection of the lowest-index coordinate axis is chosen, and the sign makes
/// the first nonzero weight positive.
fn leading_direction(s: &DMatrix<f64>) -> DVector<f64> {
    let eig = s.clone().symmetric_eigen();
    let lmax = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-10 * lmax.abs().max(1.0);
    let top: Vec<usize> = (0..s.nrows())
        .filter(|&k| eig.eigenvalues[k] >= lmax - tol)
        .collect();
    let p = s.nrows();
    let mut v = DVector::zeros(p);
    for axis in 0..p {
        let mut proj = DVector::zeros(p);
        for &k in &top {
            let e = eig.eigenvectors.column(k);
            proj += e * e[axis];
        }
        if proj.norm() > 1e-8 {
            v = proj.normalize();
            break;
        }
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v = -v;
        }
    }
    v
}

pub fn pca_index(y: &DMatrix<f64>, scale: PcaScale) -> Result<IndexFit> {
    check_columns(y, 2)?;
    let all: Vec<usize> = (0..y.nrows()).collect();
    let (means, sds) = column_moments(y, &all);
    let (x, s) = match scale {
        PcaScale::Correlation => {
            let x = standardize_with(y, &means, &sds, "measurement")?;
            let s = linalg::column_covariance(&x, 1);
            (x, s)
        }
        PcaScale::Covariance => {
            let x = centered(y);
            let s = linalg::column_covariance(&x, 1);
            (x, s)
        }
    };
    let w = leading_direction(&((&s + s.transpose()) * 0.5));
    let index = &x * &w;
    Ok(IndexFit {
        kind: IndexKind::Pca,
        weights: w.iter().cloned().collect(),
        lambdas: None,
        index_values: index.iter().cloned().collect(),
        warnings: Vec::new(),
    })
}

/// `Σ⁻¹1 / (1ᵀΣ⁻¹1)`, with a ridge fallback when `Σ` does not factor.
pub fn inverse_covariance_weights(
    sigma: &DMatrix<f64>,
    warnings: &mut Vec<String>,
) -> Result<Vec<f64>> {
    let j = sigma.nrows();
    let ones = DVector::from_element(j, 1.0);
    let sym = (sigma + sigma.transpose()) * 0.5;
    let raw = match sym.clone().cholesky() {
        Some(c) => c.solve(&ones),
        None => {
            let ridge = 1e-6 * linalg::trace_average(&sym).max(f64::MIN_POSITIVE);
            warnings.push(format!(
                "measurement covariance is singular; ridge {ridge:.3e} added before weighting"
            ));
            log::warn!("{}", warnings.last().unwrap());
            let reg = &sym + DMatrix::identity(j, j) * ridge;
            reg.cholesky()
                .ok_or_else(|| NsiError::Numerical("measurement covariance is not PSD".into()))?
                .solve(&ones)
        }
    };
    let total = raw.sum();
    if !(total.abs() > 1e-300) || !total.is_finite() {
        return Err(NsiError::Numerical(
            "inverse-covariance weights do not normalize".into(),
        ));
    }
    Ok((raw / total).iter().cloned().collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcwStandardization {
    /// Control-arm mean and SD.
    #[default]
    Control,
    FullSample,
    None,
}

/// Inverse-covariance weighted index. `z` identifies the control arm when
/// standardizing by control-group moments.
pub fn icw_index(
    y: &DMatrix<f64>,
    z: Option<&[f64]>,
    standardization: IcwStandardization,
) -> Result<IndexFit> {
    check_columns(y, 1)?;
    let x = match standardization {
        IcwStandardization::None => y.clone(),
        IcwStandardization::FullSample => {
            let all: Vec<usize> = (0..y.nrows()).collect();
            let (m, s) = column_moments(y, &all);
            standardize_with(y, &m, &s, "measurement")?
        }
        IcwStandardization::Control => {
            let z = z.ok_or_else(|| {
                NsiError::InvalidArgument("control standardization needs a treatment column".into())
            })?;
            let control: Vec<usize> = (0..y.nrows()).filter(|&i| z[i] == 0.0).collect();
            if control.len() < 2 {
                return Err(NsiError::DegenerateData(
                    "control arm has fewer than 2 units".into(),
                ));
            }
            let (m, s) = column_moments(y, &control);
            standardize_with(y, &m, &s, "control-arm measurement")?
        }
    };
    let mut warnings = Vec::new();
    let weights = if x.ncols() == 1 {
        vec![1.0]
    } else {
        inverse_covariance_weights(&linalg::column_covariance(&x, 1), &mut warnings)?
    };
    let index = &x * DVector::from_column_slice(&weights);
    Ok(IndexFit {
        kind: IndexKind::Icw,
        weights,
        lambdas: None,
        index_values: index.iter().cloned().collect(),
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub tau_hat: f64,
    pub se: f64,
}

/// HT difference in means `mean(s(Z)·index)` with SE `sd(s(Z)·index)/√n`.
pub fn index_diff_in_means(index: &[f64], z: &[f64], pi: Option<f64>) -> Result<Contrast> {
    if index.len() != z.len() {
        return Err(NsiError::DimensionMismatch {
            context: "index and treatment".into(),
            expected: z.len(),
            actual: index.len(),
        });
    }
    let treated = z.iter().filter(|&&v| v == 1.0).count();
    if treated == 0 || treated == z.len() {
        return Err(NsiError::DegenerateData(
            "difference in means needs both treatment arms".into(),
        ));
    }
    let pi = pi.unwrap_or(treated as f64 / z.len() as f64);
    let s = ht_transform(z, pi)?;
    let v: Vec<f64> = s.iter().zip(index).map(|(a, b)| a * b).collect();
    Ok(Contrast {
        tau_hat: linalg::mean(&v),
        se: (linalg::variance(&v, 1) / v.len() as f64).sqrt(),
    })
}

/// Coefficient contrasts `mean(α̂_ℓ·index)` for a Riesz target, with SEs
/// `sd(α̂_ℓ·index)/√n`.
pub fn index_contrasts(
    ds: &Dataset,
    index: &[f64],
    target: &RieszTarget,
    pi: Option<f64>,
) -> Result<Vec<Contrast>> {
    let riesz = compute_riesz_weights(ds, ds, target, pi)?;
    Ok(riesz
        .alpha
        .column_iter()
        .map(|a| {
            let v: Vec<f64> = a.iter().zip(index).map(|(a, b)| a * b).collect();
            Contrast {
                tau_hat: linalg::mean(&v),
                se: (linalg::variance(&v, 1) / v.len() as f64).sqrt(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum WsiInstrument {
    /// First treatment column.
    Treatment,
    /// Any named column, e.g. another measurement.
    Column(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsiEstimate {
    pub coefficients: Vec<String>,
    pub beta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub instrument: String,
    /// SEs treat the estimated scale factors as known.
    pub se_kind: String,
    pub index: IndexFit,
}

const WEAK_COV_TOL: f64 = 1e-8;

/// Scale factors `λ̂_j = Cov(Y_j, V)/Cov(Y₁, V)` for instrument `V`.
pub fn wsi_lambdas(y: &DMatrix<f64>, instrument: &[f64]) -> Result<Vec<f64>> {
    let bench: Vec<f64> = y.column(0).iter().cloned().collect();
    let denom = linalg::covariance(&bench, instrument, 1);
    let scale = (linalg::variance(&bench, 1) * linalg::variance(instrument, 1)).sqrt();
    if !(denom.abs() > WEAK_COV_TOL * scale.max(f64::MIN_POSITIVE)) {
        return Err(NsiError::WeakInstrument(format!(
            "instrument covariance with the benchmark is {denom:.3e}"
        )));
    }
    y.column_iter()
        .enumerate()
        .map(|(j, col)| {
            let c: Vec<f64> = col.iter().cloned().collect();
            let lam = linalg::covariance(&c, instrument, 1) / denom;
            if lam.abs() < WEAK_COV_TOL {
                Err(NsiError::WeakInstrument(format!(
                    "measurement {j} is uncorrelated with the instrument"
                )))
            } else {
                Ok(lam)
            }
        })
        .collect()
}

/// Linearly scaled index: each measurement is divided by its estimated scale
/// relative to the benchmark, the rescaled set is combined with
/// inverse-covariance weights, and the index is contrasted by treatment.
pub fn wsi_estimate(
    ds: &Dataset,
    instrument: &WsiInstrument,
    target: &RieszTarget,
    pi: Option<f64>,
) -> Result<WsiEstimate> {
    let roles = ds.roles();
    let inst_name = match instrument {
        WsiInstrument::Treatment => roles
            .treatments
            .first()
            .cloned()
            .ok_or_else(|| NsiError::Role("scaled index needs a treatment column".into()))?,
        WsiInstrument::Column(c) => c.clone(),
    };
    if inst_name == roles.benchmark {
        return Err(NsiError::Role(
            "the benchmark cannot instrument itself".into(),
        ));
    }
    let cols: Vec<String> = std::iter::once(roles.benchmark.clone())
        .chain(roles.measurements.iter().cloned())
        .collect();
    let y = ds.matrix(&cols)?;
    let lambdas = wsi_lambdas(&y, ds.column(&inst_name)?)?;
    let t = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] / lambdas[j]);
    let mut warnings = Vec::new();
    let weights = if t.ncols() == 1 {
        vec![1.0]
    } else {
        inverse_covariance_weights(&linalg::column_covariance(&t, 1), &mut warnings)?
    };
    let index: Vec<f64> = (&t * DVector::from_column_slice(&weights))
        .iter()
        .cloned()
        .collect();
    let contrasts = index_contrasts(ds, &index, target, pi)?;
    Ok(WsiEstimate {
        coefficients: target.coefficient_names(),
        beta_hat: contrasts.iter().map(|c| c.tau_hat).collect(),
        se: contrasts.iter().map(|c| c.se).collect(),
        instrument: inst_name,
        se_kind: "plug_in_index".into(),
        index: IndexFit {
            kind: IndexKind::Wsi,
            weights,
            lambdas: Some(lambdas),
            index_values: index,
            warnings,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnRoles;
    use approx::assert_relative_eq;

    fn cols(c: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(c[0].len(), c.len(), |i, j| c[j][i])
    }

    #[test]
    fn pca_perfectly_correlated() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let b: Vec<f64> = a.iter().map(|v| 3.0 * v + 1.0).collect();
        let fit = pca_index(&cols(&[&a, &b]), PcaScale::Correlation).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert_relative_eq!(fit.weights[0], h, epsilon = 1e-12);
        assert_relative_eq!(fit.weights[1], h, epsilon = 1e-12);
        let m = linalg::mean(&a);
        let sd = linalg::variance(&a, 1).sqrt();
        for (i, v) in fit.index_values.iter().enumerate() {
            assert_relative_eq!(*v, 2.0 * (a[i] - m) / sd * h, epsilon = 1e-12);
        }
    }

    #[test]
    fn pca_tie_breaks_to_first_axis() {
        let a = [1.0, -1.0, 1.0, -1.0];
        let b = [1.0, 1.0, -1.0, -1.0];
        let fit = pca_index(&cols(&[&a, &b]), PcaScale::Correlation).unwrap();
        assert_eq!(fit.weights, vec![1.0, 0.0]);
    }

    #[test]
    fn pca_covariance_dominant_axis() {
        let a = [2.0, -2.0, 2.0, -2.0, 0.0, 0.0];
        let b = [1.0, 1.0, -1.0, -1.0, 0.0, 0.0];
        let c = [1.0, -1.0, -1.0, 1.0, 0.0, 0.0];
        let fit = pca_index(&cols(&[&a, &b, &c]), PcaScale::Covariance).unwrap();
        assert_relative_eq!(fit.weights[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.weights[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(fit.weights[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_zero_variance_errors() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 1.0, 1.0];
        assert!(matches!(
            pca_index(&cols(&[&a, &b]), PcaScale::Correlation),
            Err(NsiError::Standardization { .. })
        ));
    }

    #[test]
    fn icw_weight_cases() {
        let mut w = Vec::new();
        assert_eq!(
            inverse_covariance_weights(&DMatrix::identity(2, 2), &mut w).unwrap(),
            vec![0.5, 0.5]
        );
        let d = DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 1.0]));
        let v = inverse_covariance_weights(&d, &mut w).unwrap();
        assert_relative_eq!(v[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(v[1], 2.0 / 3.0, epsilon = 1e-15);
        assert!(w.is_empty());
        let single = [3.0, 1.0, 4.0];
        let fit = icw_index(&cols(&[&single]), None, IcwStandardization::None).unwrap();
        assert_eq!(fit.weights, vec![1.0]);
        assert_eq!(fit.index_values, single.to_vec());
    }

    #[test]
    fn icw_singular_ridge_fallback() {
        let a = [1.0, 2.0, 3.0, 5.0];
        let fit = icw_index(&cols(&[&a, &a]), None, IcwStandardization::FullSample).unwrap();
        assert_eq!(fit.warnings.len(), 1);
        assert_relative_eq!(fit.weights[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn icw_doubling_variance_reduces_weight() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let mut t = s.clone();
        t[(0, 0)] = 2.0;
        let mut w = Vec::new();
        let before = inverse_covariance_weights(&s, &mut w).unwrap();
        let after = inverse_covariance_weights(&t, &mut w).unwrap();
        assert!(after[0] < before[0]);
        assert_relative_eq!(after.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn diff_in_means_cases() {
        let z = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(
            index_diff_in_means(&[3.0; 4], &z, Some(0.5))
                .unwrap()
                .tau_hat,
            0.0
        );
        assert_eq!(index_diff_in_means(&z, &z, Some(0.5)).unwrap().tau_hat, 1.0);
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        assert_eq!(
            index_diff_in_means(&neg, &z, Some(0.5)).unwrap().tau_hat,
            -1.0
        );
        assert!(index_diff_in_means(&[1.0, 2.0], &[1.0, 1.0], None).is_err());
    }

    fn wsi_dataset(y1: &[f64], y2: &[f64], z: &[f64]) -> Dataset {
        let roles = ColumnRoles::new("y1")
            .with_measurements(&["y2"])
            .with_treatments(&["z"]);
        Dataset::from_columns(
            vec!["y1".into(), "y2".into(), "z".into()],
            vec![y1.to_vec(), y2.to_vec(), z.to_vec()],
            roles,
        )
        .unwrap()
    }

    #[test]
    fn wsi_exact_proportionality() {
        let ds = wsi_dataset(
            &[0.0, 1.0, 2.0, 3.0],
            &[0.0, 2.0, 4.0, 6.0],
            &[0.0, 0.0, 1.0, 1.0],
        );
        let target = RieszTarget::default_for(&ds).unwrap();
        let est = wsi_estimate(&ds, &WsiInstrument::Treatment, &target, None).unwrap();
        let lam = est.index.lambdas.as_ref().unwrap();
        assert_eq!(lam[0], 1.0);
        assert_eq!(lam[1], 2.0);
        assert_eq!(est.se_kind, "plug_in_index");
    }

    #[test]
    fn wsi_weak_instrument() {
        let ds = wsi_dataset(
            &[1.0, 2.0, 1.0, 2.0],
            &[0.0, 2.0, 4.0, 6.0],
            &[0.0, 0.0, 1.0, 1.0],
        );
        let target = RieszTarget::default_for(&ds).unwrap();
        assert!(matches!(
            wsi_estimate(&ds, &WsiInstrument::Treatment, &target, None),
            Err(NsiError::WeakInstrument(_))
        ));
    }
}
