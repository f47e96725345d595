//! First-stage nuisance estimation: the penalized minimax bridge, the
//! auxiliary ξ problem and the projection of ξ onto the instruments.
//!
//! With φ(y) = b(y)ᵀβ and critic q(w) = c(w)ᵀγ the empirical bridge criterion
//!
//! ```text
//! min_β max_γ  γᵀ(Bβ − r) − ½ γᵀG_c γ − γ_q‖γ‖² + μ βᵀG_b β + γ_φ‖β‖²
//! ```
//!
//! with G_b = Ê[bbᵀ], G_c = Ê[ccᵀ], B = Ê[cbᵀ], r = Ê[c·Y₁] is strictly
//! concave in γ. The inner maximizer is γ* = D(Bβ − r) with
//! D = (G_c + 2γ_q I)⁻¹, leaving ½(Bβ − r)ᵀD(Bβ − r) + μβᵀG_bβ + γ_φ‖β‖² whose
//! minimizer is
//!
//! ```text
//! β = (BᵀDB + 2μG_b + 2γ_φ I)⁻¹ BᵀD r.
//! ```
//!
//! The ξ problem replaces −Y₁ q(W) by −α(R) ξ(Y) and drops μ, giving
//! δ = (BᵀDB + 2γ_ξ I)⁻¹ a with a = Ê[α(R) b(Y)]. The projection of ξ̂ on the
//! instrument dictionary is the ridge solve θ = (G_c + ρI)⁻¹ Bδ.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{fit_basis_named, BasisSpec, FittedBasis};
use crate::data::Dataset;
use crate::error::{NsiError, Result};
use crate::linalg;

/// Resolved regularization weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Weight on Ê[φ(Y)²].
    pub mu: f64,
    pub gamma_phi: f64,
    pub gamma_q: f64,
    pub gamma_xi: f64,
    pub ridge_q: f64,
}

impl HyperParams {
    pub fn uniform(value: f64) -> Self {
        HyperParams {
            mu: value,
            gamma_phi: value,
            gamma_q: value,
            gamma_xi: value,
            ridge_q: value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mu,
            self.gamma_phi,
            self.gamma_q,
            self.gamma_xi,
            self.ridge_q,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(NsiError::InvalidArgument(format!(
                "penalties must be finite and non-negative: {self:?}"
            )));
        }
        if !(self.mu > 0.0 || self.gamma_phi > 0.0) || !(self.gamma_q > 0.0) {
            return Err(NsiError::InvalidArgument(
                "need mu or gamma_phi > 0 and gamma_q > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Penalty configuration; unset weights default to
/// `penalty_scale · n^{-1/2}`, times the trace-average of the Gram matrix
/// the penalty acts against (G_b for γ_φ and γ_ξ, G_c for γ_q and the
/// projection ridge; μ already multiplies G_b).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperSpec {
    pub penalty_scale: f64,
    pub mu: Option<f64>,
    pub gamma_phi: Option<f64>,
    pub gamma_q: Option<f64>,
    pub gamma_xi: Option<f64>,
    pub ridge_q: Option<f64>,
}

impl Default for HyperSpec {
    fn default() -> Self {
        HyperSpec {
            penalty_scale: 0.01,
            mu: None,
            gamma_phi: None,
            gamma_q: None,
            gamma_xi: None,
            ridge_q: None,
        }
    }
}

impl HyperSpec {
    pub fn fixed(h: HyperParams) -> Self {
        HyperSpec {
            penalty_scale: 0.0,
            mu: Some(h.mu),
            gamma_phi: Some(h.gamma_phi),
            gamma_q: Some(h.gamma_q),
            gamma_xi: Some(h.gamma_xi),
            ridge_q: Some(h.ridge_q),
        }
    }

    pub fn resolve(&self, n: usize, g_b: &DMatrix<f64>, g_c: &DMatrix<f64>) -> HyperParams {
        let base = self.penalty_scale / (n.max(1) as f64).sqrt();
        let tb = linalg::trace_average(g_b);
        let tc = linalg::trace_average(g_c);
        HyperParams {
            mu: self.mu.unwrap_or(base),
            gamma_phi: self.gamma_phi.unwrap_or(base * tb),
            gamma_q: self.gamma_q.unwrap_or(base * tc),
            gamma_xi: self.gamma_xi.unwrap_or(base * tb),
            ridge_q: self.ridge_q.unwrap_or(base * tc),
        }
    }
}

/// Empirical moments that determine every closed-form first-stage solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimaxSystem {
    /// Ê[b bᵀ]
    pub g_b: DMatrix<f64>,
    /// Ê[c cᵀ]
    pub g_c: DMatrix<f64>,
    /// Ê[c bᵀ], dim(c) × dim(b)
    pub cross: DMatrix<f64>,
    /// Ê[c Y₁]
    pub r: DVector<f64>,
    pub n: usize,
}

impl MinimaxSystem {
    pub fn from_features(b: &DMatrix<f64>, c: &DMatrix<f64>, y1: &[f64]) -> Self {
        let n = b.nrows();
        let y = DVector::from_column_slice(y1);
        MinimaxSystem {
            g_b: linalg::gram(b),
            g_c: linalg::gram(c),
            cross: linalg::cross_moment(c, b),
            r: c.tr_mul(&y) / n as f64,
            n,
        }
    }

    /// D = (G_c + 2γ_q I)⁻¹
    pub fn critic_inverse(&self, gamma_q: f64) -> Result<DMatrix<f64>> {
        let mut m = self.g_c.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += 2.0 * gamma_q;
        }
        linalg::spd_inverse(&m, "critic Gram")
    }

    fn outer(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        let bt_d = self.cross.transpose() * d;
        let out = &bt_d * &self.cross;
        (&out + out.transpose()) * 0.5
    }

    pub fn solve_bridge(&self, h: &HyperParams) -> Result<DVector<f64>> {
        let d = self.critic_inverse(h.gamma_q)?;
        let mut lhs = self.outer(&d) + &self.g_b * (2.0 * h.mu);
        for i in 0..lhs.nrows() {
            lhs[(i, i)] += 2.0 * h.gamma_phi;
        }
        let rhs = self.cross.transpose() * (&d * &self.r);
        linalg::spd_solve_vec(&lhs, &rhs, "bridge normal equations")
    }

    /// Left side of the bridge first-order condition,
    /// BᵀD(Bβ − r) + 2μG_bβ + 2γ_φβ.
    pub fn bridge_gradient(&self, beta: &DVector<f64>, h: &HyperParams) -> Result<DVector<f64>> {
        let d = self.critic_inverse(h.gamma_q)?;
        let resid = &self.cross * beta - &self.r;
        Ok(self.cross.transpose() * (&d * resid)
            + &self.g_b * beta * (2.0 * h.mu)
            + beta * (2.0 * h.gamma_phi))
    }

    /// Returns δ and the attained saddle value of the ξ criterion.
    pub fn solve_xi(
        &self,
        a: &DVector<f64>,
        gamma_q: f64,
        gamma_xi: f64,
    ) -> Result<(DVector<f64>, f64)> {
        let d = self.critic_inverse(gamma_q)?;
        let mut lhs = self.outer(&d);
        for i in 0..lhs.nrows() {
            lhs[(i, i)] += 2.0 * gamma_xi;
        }
        let delta = linalg::spd_solve_vec(&lhs, a, "xi normal equations")?;
        let bd = &self.cross * &delta;
        let value = 0.5 * bd.dot(&(&d * &bd)) - a.dot(&delta) + gamma_xi * delta.norm_squared();
        Ok((delta, value))
    }

    /// θ = (G_c + ρI)⁻¹ B δ: ridge regression of b(Y)ᵀδ on c(W).
    pub fn project_q(&self, delta: &DVector<f64>, ridge_q: f64) -> Result<DVector<f64>> {
        let mut lhs = self.g_c.clone();
        for i in 0..lhs.nrows() {
            lhs[(i, i)] += ridge_q;
        }
        let rhs = &self.cross * delta;
        if ridge_q == 0.0 {
            let chol = lhs.clone().cholesky().ok_or_else(|| {
                NsiError::Numerical("instrument Gram is singular and ridge_q = 0".into())
            })?;
            return Ok(chol.solve(&rhs));
        }
        linalg::spd_solve_vec(&lhs, &rhs, "q projection")
    }
}

/// Fitted measurement bridge φ̂(y) = b(y)ᵀβ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeFit {
    pub measurement: String,
    pub instruments: Vec<String>,
    pub phi_basis: FittedBasis,
    pub w_basis: FittedBasis,
    pub beta: DVector<f64>,
    pub hyper: HyperParams,
    pub system: MinimaxSystem,
}

/// ξ̂ coefficients on the bridge dictionary and q̂ coefficients on the
/// instrument dictionary, for one Riesz weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub delta: DVector<f64>,
    pub theta: DVector<f64>,
    pub xi_objective: f64,
}

impl BridgeFit {
    pub fn apply(&self, y_values: &[f64]) -> Result<Vec<f64>> {
        apply_bridge(self, y_values)
    }

    pub fn phi_features(&self, ds: &Dataset) -> Result<DMatrix<f64>> {
        self.phi_basis.evaluate_vec(ds.column(&self.measurement)?)
    }

    pub fn w_features(&self, ds: &Dataset) -> Result<DMatrix<f64>> {
        self.w_basis.evaluate(&ds.matrix(&self.instruments)?)
    }

    /// Relative residual of the bridge first-order condition.
    pub fn foc_residual(&self) -> Result<f64> {
        let g = self.system.bridge_gradient(&self.beta, &self.hyper)?;
        let d = self.system.critic_inverse(self.hyper.gamma_q)?;
        let scale = (self.system.cross.transpose() * (&d * &self.system.r)).norm();
        Ok(g.norm() / scale.max(f64::MIN_POSITIVE))
    }
}

pub fn apply_bridge(fit: &BridgeFit, y_values: &[f64]) -> Result<Vec<f64>> {
    let f = fit.phi_basis.evaluate_vec(y_values)?;
    Ok((f * &fit.beta).iter().cloned().collect())
}

/// Fits φ̂ for `measurement` on the training rows of `train`.
pub fn fit_bridge_minimax(
    train: &Dataset,
    measurement: &str,
    phi_spec: &BasisSpec,
    w_spec: &BasisSpec,
    hyper: &HyperSpec,
    seed: u64,
) -> Result<BridgeFit> {
    let instruments = train.roles().instruments_for(measurement);
    fit_bridge_with_instruments(
        train,
        measurement,
        &instruments,
        phi_spec,
        w_spec,
        hyper,
        seed,
    )
}

pub fn fit_bridge_with_instruments(
    train: &Dataset,
    measurement: &str,
    instruments: &[String],
    phi_spec: &BasisSpec,
    w_spec: &BasisSpec,
    hyper: &HyperSpec,
    seed: u64,
) -> Result<BridgeFit> {
    if instruments.is_empty() {
        return Err(NsiError::Role(format!(
            "no instruments for '{measurement}'"
        )));
    }
    let w_raw = train.matrix(instruments)?;
    for (j, col) in w_raw.column_iter().enumerate() {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            return Err(NsiError::Numerical(format!(
                "instrument '{}' is constant on the training rows; the critic is degenerate",
                instruments[j]
            )));
        }
    }
    let y = train.column(measurement)?;
    let y1 = train.benchmark();
    let y_mat = DMatrix::from_column_slice(y.len(), 1, y);
    let phi_basis = fit_basis_named(phi_spec, &y_mat, &[measurement.to_string()], Some(y1), seed)?;
    let w_basis = fit_basis_named(w_spec, &w_raw, instruments, Some(y1), seed ^ 0x9e37_79b9)?;
    let n = train.n();
    let need = phi_basis.dimension().max(w_basis.dimension());
    if n < need {
        return Err(NsiError::InsufficientData(format!(
            "{n} training rows for dictionaries of dimension {} and {}",
            phi_basis.dimension(),
            w_basis.dimension()
        )));
    }
    let b = phi_basis.evaluate(&y_mat)?;
    let c = w_basis.evaluate(&w_raw)?;
    let system = MinimaxSystem::from_features(&b, &c, y1);
    let resolved = hyper.resolve(n, &system.g_b, &system.g_c);
    resolved.validate()?;
    let beta = system.solve_bridge(&resolved)?;
    Ok(BridgeFit {
        measurement: measurement.to_string(),
        instruments: instruments.to_vec(),
        phi_basis,
        w_basis,
        beta,
        hyper: resolved,
        system,
    })
}

/// Solves the ξ problem for Riesz values α̂(R_i) on the same training rows
/// the bridge was fitted on. Returns δ and the attained objective.
pub fn fit_xi_minimax(
    train: &Dataset,
    fit: &BridgeFit,
    riesz_values: &[f64],
) -> Result<(DVector<f64>, f64)> {
    if riesz_values.len() != train.n() {
        return Err(NsiError::DimensionMismatch {
            context: "riesz values".into(),
            expected: train.n(),
            actual: riesz_values.len(),
        });
    }
    if riesz_values.iter().any(|v| !v.is_finite()) {
        return Err(NsiError::Numerical("non-finite Riesz weights".into()));
    }
    let b = fit.phi_features(train)?;
    let alpha = DVector::from_column_slice(riesz_values);
    let a = b.tr_mul(&alpha) / train.n() as f64;
    fit.system
        .solve_xi(&a, fit.hyper.gamma_q, fit.hyper.gamma_xi)
}

pub fn project_q(fit: &BridgeFit, delta: &DVector<f64>) -> Result<DVector<f64>> {
    fit.system.project_q(delta, fit.hyper.ridge_q)
}

/// ξ̂ and q̂ for one Riesz weight.
pub fn fit_nuisance(train: &Dataset, fit: &BridgeFit, riesz_values: &[f64]) -> Result<NuisanceFit> {
    let (delta, xi_objective) = fit_xi_minimax(train, fit, riesz_values)?;
    let theta = project_q(fit, &delta)?;
    Ok(NuisanceFit {
        delta,
        theta,
        xi_objective,
    })
}

impl NuisanceFit {
    pub fn q_values(&self, fit: &BridgeFit, ds: &Dataset) -> Result<Vec<f64>> {
        Ok((fit.w_features(ds)? * &self.theta)
            .iter()
            .cloned()
            .collect())
    }
}
