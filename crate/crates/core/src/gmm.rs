//! Pooling measurement-specific moments into one coefficient vector.
//!
//! Each measurement's score block targets the same `d_R` coefficients, so the
//! stacked restriction is `E[ψ_stack] = A β` with `A = 1_J ⊗ I_{d_R}`. For a
//! weighting matrix `W` the minimizer of `(m̄ − Aβ)ᵀ W (m̄ − Aβ)` is `β = L m̄`,
//! `L = (AᵀWA)⁻¹AᵀW`, with covariance `L Ω̂ Lᵀ / n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{NsiError, Result};
use crate::linalg;
use crate::score::ScoreMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Identity,
    #[default]
    Efficient,
}

impl std::str::FromStr for Weighting {
    type Err = NsiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Weighting::Identity),
            "efficient" | "optimal" => Ok(Weighting::Efficient),
            other => Err(NsiError::InvalidArgument(format!(
                "unknown weighting '{other}' (identity|efficient)"
            ))),
        }
    }
}

/// Stacked moment means and their covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    /// Length `J·d_R`, measurement-major.
    pub m_bar: DVector<f64>,
    /// Covariance of the stacked per-unit scores (divisor `n`).
    pub omega: DMatrix<f64>,
    pub n: usize,
    pub n_measurements: usize,
    pub d_r: usize,
}

impl MomentSummary {
    pub fn new(m_bar: DVector<f64>, omega: DMatrix<f64>, n: usize, d_r: usize) -> Result<Self> {
        let k = m_bar.len();
        if d_r == 0 || k == 0 || !k.is_multiple_of(d_r) {
            return Err(NsiError::InvalidArgument(format!(
                "moment vector of length {k} is not a multiple of d_R = {d_r}"
            )));
        }
        if omega.nrows() != k || omega.ncols() != k {
            return Err(NsiError::DimensionMismatch {
                context: "moment covariance".into(),
                expected: k,
                actual: omega.nrows(),
            });
        }
        Ok(MomentSummary {
            m_bar,
            omega,
            n,
            n_measurements: k / d_r,
            d_r,
        })
    }
}

pub fn summarize_moments(scores: &ScoreMatrix) -> Result<MomentSummary> {
    let n = scores.n();
    if n < 2 {
        return Err(NsiError::InsufficientData(
            "moment covariance needs at least 2 units".into(),
        ));
    }
    let stacked = scores.stacked();
    if stacked.iter().any(|v| !v.is_finite()) {
        return Err(NsiError::Numerical("non-finite score".into()));
    }
    let m_bar = stacked.row_mean().transpose();
    let omega = linalg::column_covariance(&stacked, 0);
    MomentSummary::new(m_bar, (&omega + omega.transpose()) * 0.5, n, scores.d_r())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmEstimate {
    pub coefficients: Vec<String>,
    pub beta_hat: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub se: Vec<f64>,
    /// Overidentification statistic; reported under efficient weighting.
    pub j_stat: Option<f64>,
    pub j_df: usize,
    pub j_p_value: Option<f64>,
    pub weighting: Weighting,
    /// `J × d_R` unpooled moment means, measurement-major rows.
    pub per_measurement: Vec<Vec<f64>>,
    /// Aggregation matrix `L`, `d_R × J·d_R`.
    pub aggregation: DMatrix<f64>,
    pub n: usize,
}

impl GmmEstimate {
    pub fn coefficient_index(&self, name: &str) -> Option<usize> {
        self.coefficients.iter().position(|c| c == name)
    }

    /// Two-sided normal p-value for `β_ℓ = 0`.
    pub fn p_value(&self, l: usize) -> f64 {
        two_sided_normal_p(self.beta_hat[l] / self.se[l])
    }
}

pub fn two_sided_normal_p(t: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    chi2_sf(t * t, 1)
}

pub fn chi2_sf(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("df > 0");
    dist.sf(stat.max(0.0))
}

pub fn chi2_quantile(p: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64).expect("df > 0").inverse_cdf(p)
}

fn default_ridge(omega: &DMatrix<f64>) -> f64 {
    1e-8 * omega.trace() / omega.nrows() as f64
}

fn weight_matrix(
    summary: &MomentSummary,
    weighting: Weighting,
    ridge: Option<f64>,
) -> Result<DMatrix<f64>> {
    let k = summary.m_bar.len();
    match weighting {
        Weighting::Identity => Ok(DMatrix::identity(k, k)),
        Weighting::Efficient => {
            let ridge = ridge.unwrap_or_else(|| default_ridge(&summary.omega));
            let mut o = summary.omega.clone();
            for i in 0..k {
                o[(i, i)] += ridge;
            }
            let chol = o.cholesky().ok_or_else(|| {
                NsiError::Numerical("moment covariance is singular; increase the GMM ridge".into())
            })?;
            Ok(chol.inverse())
        }
    }
}

fn stacking_matrix(j: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(j * d, d, |r, c| if r % d == c { 1.0 } else { 0.0 })
}

fn per_measurement(summary: &MomentSummary) -> Vec<Vec<f64>> {
    summary
        .m_bar
        .as_slice()
        .chunks(summary.d_r)
        .map(<[f64]>::to_vec)
        .collect()
}

fn finish(
    summary: &MomentSummary,
    names: Vec<String>,
    beta: DVector<f64>,
    l: DMatrix<f64>,
    weighting: Weighting,
    w_eff: Option<&DMatrix<f64>>,
) -> GmmEstimate {
    let cov = &l * &summary.omega * l.transpose() / summary.n as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    let se = cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    let df = (summary.n_measurements - 1) * summary.d_r;
    let j_stat = match (summary.n_measurements, w_eff) {
        (1, _) => Some(0.0),
        (_, Some(w)) => {
            let a = stacking_matrix(summary.n_measurements, summary.d_r);
            let resid = &summary.m_bar - a * &beta;
            Some(summary.n as f64 * resid.dot(&(w * &resid)))
        }
        _ => None,
    };
    GmmEstimate {
        coefficients: names,
        beta_hat: beta.iter().cloned().collect(),
        cov,
        se,
        j_stat,
        j_df: df,
        j_p_value: j_stat.map(|s| chi2_sf(s, df)),
        weighting,
        per_measurement: per_measurement(summary),
        aggregation: l,
        n: summary.n,
    }
}

fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|l| format!("b{l}")).collect()
}

/// Joint GMM over all coefficients. `ridge` overrides the default
/// `1e-8·tr(Ω̂)/(J·d_R)` added to Ω̂ under efficient weighting.
pub fn pool_gmm(
    summary: &MomentSummary,
    weighting: Weighting,
    ridge: Option<f64>,
) -> Result<GmmEstimate> {
    pool_gmm_named(summary, weighting, ridge, default_names(summary.d_r))
}

pub fn pool_gmm_named(
    summary: &MomentSummary,
    weighting: Weighting,
    ridge: Option<f64>,
    names: Vec<String>,
) -> Result<GmmEstimate> {
    let (j, d) = (summary.n_measurements, summary.d_r);
    if j == 1 {
        let l = DMatrix::identity(d, d);
        return Ok(finish(
            summary,
            names,
            summary.m_bar.clone(),
            l,
            weighting,
            None,
        ));
    }
    let w = weight_matrix(summary, weighting, ridge)?;
    let a = stacking_matrix(j, d);
    let atw = a.transpose() * &w;
    let info = &atw * &a;
    let l = linalg::spd_solve(&((&info + info.transpose()) * 0.5), &atw, "GMM information")?.0;
    let beta = &l * &summary.m_bar;
    let eff = matches!(weighting, Weighting::Efficient).then_some(&w);
    Ok(finish(summary, names, beta, l, weighting, eff))
}

/// Scalar GMM per coefficient across measurements; cross-coefficient
/// covariances come from applying the per-coefficient aggregation rows to the
/// full Ω̂. Under efficient weighting the reported J statistic is the joint
/// quadratic form at these estimates, which bounds the joint minimum from above.
pub fn pool_per_coefficient(
    summary: &MomentSummary,
    weighting: Weighting,
    ridge: Option<f64>,
) -> Result<GmmEstimate> {
    pool_per_coefficient_named(summary, weighting, ridge, default_names(summary.d_r))
}

pub fn pool_per_coefficient_named(
    summary: &MomentSummary,
    weighting: Weighting,
    ridge: Option<f64>,
    names: Vec<String>,
) -> Result<GmmEstimate> {
    let (j, d) = (summary.n_measurements, summary.d_r);
    if d == 1 || j == 1 {
        return pool_gmm_named(summary, weighting, ridge, names);
    }
    let mut l = DMatrix::zeros(d, j * d);
    for c in 0..d {
        let idx: Vec<usize> = (0..j).map(|m| m * d + c).collect();
        let sub = MomentSummary::new(
            DVector::from_iterator(j, idx.iter().map(|&i| summary.m_bar[i])),
            DMatrix::from_fn(j, j, |a, b| summary.omega[(idx[a], idx[b])]),
            summary.n,
            1,
        )?;
        let est = pool_gmm(&sub, weighting, ridge)?;
        for (m, &i) in idx.iter().enumerate() {
            l[(c, i)] = est.aggregation[(0, m)];
        }
    }
    let beta = &l * &summary.m_bar;
    let w = match weighting {
        Weighting::Efficient => Some(weight_matrix(summary, weighting, ridge)?),
        Weighting::Identity => None,
    };
    Ok(finish(summary, names, beta, l, weighting, w.as_ref()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub gap: f64,
    pub stat: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Equality test of one coefficient across two independent studies.
pub fn wald_equality(tau_a: f64, se_a: f64, tau_b: f64, se_b: f64) -> Result<WaldTest> {
    let var = se_a * se_a + se_b * se_b;
    if !(var > 0.0) || !var.is_finite() {
        return Err(NsiError::InvalidArgument(
            "Wald test undefined: both standard errors are zero".into(),
        ));
    }
    let gap = tau_a - tau_b;
    let stat = gap * gap / var;
    Ok(WaldTest {
        gap,
        stat,
        df: 1,
        p_value: chi2_sf(stat, 1),
    })
}

pub fn wald_equality_test(
    a: &GmmEstimate,
    b: &GmmEstimate,
    coefficient: usize,
) -> Result<WaldTest> {
    if coefficient >= a.beta_hat.len() || coefficient >= b.beta_hat.len() {
        return Err(NsiError::InvalidArgument(format!(
            "coefficient index {coefficient} out of range"
        )));
    }
    wald_equality(
        a.beta_hat[coefficient],
        a.se[coefficient],
        b.beta_hat[coefficient],
        b.se[coefficient],
    )
}
