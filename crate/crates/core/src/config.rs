//! Run configuration read from a TOML file and overridden by CLI flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{IcwStandardization, PcaScale, WsiInstrument};
use crate::basis::{BasisKind, BasisSpec};
use crate::bridge::HyperSpec;
use crate::data::ColumnRoles;
use crate::error::{NsiError, Result};
use crate::estimator::{NsiConfig, Pooling};
use crate::gmm::Weighting;
use crate::simulation::{simulation_nsi_config, DgpSpec, EstimatorKind, McConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub benchmark: String,
    pub measurements: Vec<String>,
    pub treatments: Vec<String>,
    pub covariates: Vec<String>,
    /// Explicit instrument list; empty means treatments, covariates and the
    /// other measurements.
    pub instruments: Vec<String>,
}

impl DataConfig {
    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles::new(self.benchmark.clone())
            .with_measurements(&self.measurements)
            .with_treatments(&self.treatments)
            .with_covariates(&self.covariates)
            .with_instruments(&self.instruments)
    }
}

/// Dictionaries for one basis family; a missing entry takes the family default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBases {
    pub bridge: Option<BasisSpec>,
    pub instrument: Option<BasisSpec>,
}

impl StageBases {
    pub fn resolve(&self, kind: BasisKind) -> (BasisSpec, BasisSpec) {
        let force = |s: &Option<BasisSpec>, default: BasisSpec| {
            s.clone().map_or(default, |mut s| {
                s.kind = kind;
                s
            })
        };
        (
            force(&self.bridge, BasisSpec::default_bridge(kind)),
            force(&self.instrument, BasisSpec::default_instrument(kind)),
        )
    }

    fn resolved(&self, kind: BasisKind) -> Self {
        let (b, i) = self.resolve(kind);
        StageBases {
            bridge: Some(b),
            instrument: Some(i),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub series: StageBases,
    pub kernel: StageBases,
    pub tree: StageBases,
}

impl BasisConfig {
    pub fn for_kind(&self, kind: BasisKind) -> &StageBases {
        match kind {
            BasisKind::Polynomial => &self.series,
            BasisKind::KernelNystrom => &self.kernel,
            BasisKind::TreeLeaf => &self.tree,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WsiConfig {
    /// Instrument column; defaults to the first treatment.
    pub instrument: Option<String>,
}

impl WsiConfig {
    pub fn instrument(&self) -> WsiInstrument {
        self.instrument
            .clone()
            .map_or(WsiInstrument::Treatment, WsiInstrument::Column)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub dgp: DgpSpec,
    pub reps: usize,
    pub estimators: Vec<String>,
    /// Known treatment probability used in HT weights.
    pub design_pi: Option<f64>,
    pub pca_scale: PcaScale,
    pub icw_standardization: IcwStandardization,
    /// Dictionaries for the NSI estimator; defaults to 30-center kernels.
    pub nsi: StageBases,
    pub histogram_bins: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            dgp: DgpSpec::default(),
            reps: 300,
            estimators: EstimatorKind::ALL
                .iter()
                .map(|k| k.label().to_ascii_lowercase())
                .collect(),
            design_pi: None,
            pca_scale: PcaScale::default(),
            icw_standardization: IcwStandardization::default(),
            nsi: StageBases::default(),
            histogram_bins: 30,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Latent-by-measurement category counts for the completeness check.
    pub completeness_table: Option<Vec<Vec<f64>>>,
}

/// Estimator variants reported by `estimate`: NSI per basis family plus the
/// scaled index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Nsi(BasisKind),
    Wsi,
}

impl Variant {
    pub const DEFAULT: [Variant; 4] = [
        Variant::Nsi(BasisKind::Polynomial),
        Variant::Nsi(BasisKind::KernelNystrom),
        Variant::Nsi(BasisKind::TreeLeaf),
        Variant::Wsi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nsi(kind) => kind.label(),
            Variant::Wsi => "wsi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "wsi" {
            return Ok(Variant::Wsi);
        }
        BasisKind::from_label(&s).map(Variant::Nsi).ok_or_else(|| {
            NsiError::InvalidArgument(format!(
                "unknown estimator variant '{s}' (series|kernel|tree|wsi)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub folds: usize,
    pub weighting: Weighting,
    pub pooling: Pooling,
    pub gmm_ridge: Option<f64>,
    /// Estimator list; its meaning depends on the subcommand.
    pub estimators: Option<Vec<String>>,
    pub data: Option<DataConfig>,
    /// Known assignment probability per treatment column.
    pub design_pi: BTreeMap<String, f64>,
    pub hyper: HyperSpec,
    pub basis: BasisConfig,
    pub wsi: WsiConfig,
    pub simulation: SimulationConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            output: None,
            folds: 5,
            weighting: Weighting::Efficient,
            pooling: Pooling::Joint,
            gmm_ridge: None,
            estimators: None,
            data: None,
            design_pi: BTreeMap::new(),
            hyper: HyperSpec::default(),
            basis: BasisConfig::default(),
            wsi: WsiConfig::default(),
            simulation: SimulationConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| NsiError::Config(e.to_string()))
    }

    /// Reads a config file; a relative data path is taken relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NsiError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| NsiError::Config(format!("{}: {e}", path.display())))?;
        if let Some(data) = cfg.data.as_mut() {
            if let (Some(p), Some(dir)) = (data.path.as_ref(), path.parent()) {
                if p.is_relative() {
                    data.path = Some(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| NsiError::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| NsiError::Config("missing [data] section".into()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .clone()
            .unwrap_or_else(|| PathBuf::from("nsi-output"))
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        let list = match &self.estimators {
            None => return Ok(Variant::DEFAULT.to_vec()),
            Some(l) => l,
        };
        if list.is_empty() {
            return Err(NsiError::Config("estimator list is empty".into()));
        }
        let mut out: Vec<Variant> = Vec::new();
        for s in list {
            let v = Variant::parse(s)?;
            if !out.contains(&v) {
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn nsi_config(&self, kind: BasisKind, design_pi: Option<f64>) -> Result<NsiConfig> {
        let (phi, w) = self.basis.for_kind(kind).resolve(kind);
        Ok(NsiConfig {
            folds: self.folds,
            target: None,
            phi_basis: phi,
            w_basis: w,
            hyper: self.hyper.clone(),
            weighting: self.weighting,
            pooling: self.pooling,
            gmm_ridge: self.gmm_ridge,
            design_pi,
            seed: self.seed()?,
        })
    }

    pub fn simulation_estimators(&self) -> Result<Vec<EstimatorKind>> {
        let list = self
            .estimators
            .as_ref()
            .unwrap_or(&self.simulation.estimators);
        if list.is_empty() {
            return Err(NsiError::Config("estimator list is empty".into()));
        }
        let mut out: Vec<EstimatorKind> = Vec::new();
        for s in list {
            let k: EstimatorKind = s.parse()?;
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn mc_config(&self) -> Result<McConfig> {
        let mut nsi = simulation_nsi_config();
        if let Some(b) = &self.simulation.nsi.bridge {
            nsi.phi_basis = b.clone();
        }
        if let Some(w) = &self.simulation.nsi.instrument {
            nsi.w_basis = w.clone();
        }
        nsi.folds = self.folds;
        nsi.hyper = self.hyper.clone();
        nsi.weighting = self.weighting;
        nsi.pooling = self.pooling;
        nsi.gmm_ridge = self.gmm_ridge;
        Ok(McConfig {
            estimators: self.simulation_estimators()?,
            reps: self.simulation.reps,
            master_seed: self.seed()?,
            nsi,
            pca_scale: self.simulation.pca_scale,
            icw_standardization: self.simulation.icw_standardization,
            wsi_instrument: self.wsi.instrument(),
            design_pi: self.simulation.design_pi,
            alpha: 0.05,
        })
    }

    /// Copy with every defaulted dictionary written out, for embedding in reports.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.basis = BasisConfig {
            series: self.basis.series.resolved(BasisKind::Polynomial),
            kernel: self.basis.kernel.resolved(BasisKind::KernelNystrom),
            tree: self.basis.tree.resolved(BasisKind::TreeLeaf),
        };
        let sim = simulation_nsi_config();
        out.simulation.nsi = StageBases {
            bridge: Some(self.simulation.nsi.bridge.clone().unwrap_or(sim.phi_basis)),
            instrument: Some(
                self.simulation
                    .nsi
                    .instrument
                    .clone()
                    .unwrap_or(sim.w_basis),
            ),
        };
        out.output = Some(self.output_dir());
        out
    }

    /// Resolved configuration without the output location, so that reports
    /// written to different directories stay byte-identical.
    pub fn to_json_value(&self) -> serde_json::Value {
        let mut cfg = self.resolved();
        cfg.output = None;
        serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
    }
}
