//! End-to-end NSI estimation: fold assignment, cross-fitted scores and GMM
//! pooling across the benchmark and every bridged measurement.

use serde::{Deserialize, Serialize};

use crate::basis::{BasisKind, BasisSpec};
use crate::bridge::HyperSpec;
use crate::data::{assign_folds, Dataset, FoldAssignment};
use crate::diagnostics::DiagnosticsReport;
use crate::error::Result;
use crate::gmm::{self, GmmEstimate, MomentSummary, Weighting};
use crate::score::{crossfit_scores, CrossFit, CrossFitSpec, RieszTarget};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Joint,
    PerCoefficient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsiConfig {
    pub folds: usize,
    /// `None` selects the default target for the dataset's roles.
    pub target: Option<RieszTarget>,
    pub phi_basis: BasisSpec,
    pub w_basis: BasisSpec,
    pub hyper: HyperSpec,
    pub weighting: Weighting,
    pub pooling: Pooling,
    pub gmm_ridge: Option<f64>,
    /// Known treatment probability for an HT contrast.
    pub design_pi: Option<f64>,
    pub seed: u64,
}

impl NsiConfig {
    pub fn new(kind: BasisKind) -> Self {
        NsiConfig {
            folds: 5,
            target: None,
            phi_basis: BasisSpec::default_bridge(kind),
            w_basis: BasisSpec::default_instrument(kind),
            hyper: HyperSpec::default(),
            weighting: Weighting::Efficient,
            pooling: Pooling::Joint,
            gmm_ridge: None,
            design_pi: None,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_folds(mut self, folds: usize) -> Self {
        self.folds = folds;
        self
    }
}

impl Default for NsiConfig {
    fn default() -> Self {
        NsiConfig::new(BasisKind::Polynomial)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NsiResult {
    pub estimate: GmmEstimate,
    pub moments: MomentSummary,
    pub crossfit: CrossFit,
    pub diagnostics: DiagnosticsReport,
    pub target: RieszTarget,
}

pub fn estimate_nsi(ds: &Dataset, cfg: &NsiConfig) -> Result<NsiResult> {
    let folds = assign_folds(ds.n(), cfg.folds, cfg.seed)?;
    estimate_nsi_with_folds(ds, &folds, cfg)
}

pub fn estimate_nsi_with_folds(
    ds: &Dataset,
    folds: &FoldAssignment,
    cfg: &NsiConfig,
) -> Result<NsiResult> {
    cfg.phi_basis.validate()?;
    cfg.w_basis.validate()?;
    let target = match &cfg.target {
        Some(t) => t.clone(),
        None => RieszTarget::default_for(ds)?,
    };
    let spec = CrossFitSpec {
        target: target.clone(),
        phi_basis: cfg.phi_basis.clone(),
        w_basis: cfg.w_basis.clone(),
        hyper: cfg.hyper.clone(),
        design_pi: cfg.design_pi,
        seed: cfg.seed,
    };
    let crossfit = crossfit_scores(ds, folds, &spec)?;
    let moments = gmm::summarize_moments(&crossfit.scores)?;
    let names = crossfit.scores.coefficients.clone();
    let estimate = match cfg.pooling {
        Pooling::Joint => gmm::pool_gmm_named(&moments, cfg.weighting, cfg.gmm_ridge, names)?,
        Pooling::PerCoefficient => {
            gmm::pool_per_coefficient_named(&moments, cfg.weighting, cfg.gmm_ridge, names)?
        }
    };
    let diagnostics = DiagnosticsReport::from_fits(&crossfit.fits);
    Ok(NsiResult {
        estimate,
        moments,
        crossfit,
        diagnostics,
        target,
    })
}
