//! Resolved run configuration. Values come from built-in defaults, then an
//! optional JSON file, then command-line flags, each layer overriding the
//! previous one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analyze::{KMeansConfig, QualityConfig};
use crate::error::{Error, Result};
use crate::ibl::IblParams;
use crate::lstm::LstmConfig;
use crate::report::Format;
use crate::sim::{CohortSpec, CounterfactualMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSettings {
    /// Cluster count used for assignments and the regimen experiment.
    pub k: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans: KMeansConfig,
    pub references: usize,
    pub reference_restarts: usize,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        let q = QualityConfig::default();
        Self {
            k: 3,
            k_min: 2,
            k_max: 8,
            kmeans: q.kmeans,
            references: q.references,
            reference_restarts: q.reference_restarts,
        }
    }
}

impl ClusterSettings {
    pub fn quality(&self) -> QualityConfig {
        QualityConfig {
            kmeans: self.kmeans.clone(),
            references: self.references,
            reference_restarts: self.reference_restarts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub models: usize,
    pub hidden: usize,
    pub samples: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            models: 10,
            hidden: 4,
            samples: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train_weeks: usize,
    pub test_weeks: usize,
    pub budget_fraction: f64,
    pub threshold: f64,
    pub horizon: usize,
    pub ibl: IblParams,
    /// Keep recording each observed test week into IBL memory after it is
    /// predicted during one-step evaluation. Attribute weights stay fixed.
    pub online_ibl: bool,
    pub lstm: LstmConfig,
    /// Synthetic cohort used when `input` is absent. Its seed is replaced
    /// by the run seed.
    pub cohort: CohortSpec,
    pub input: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub counterfactual: CounterfactualMode,
    pub cluster: ClusterSettings,
    pub gradcheck: GradcheckSettings,
    pub format: Format,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_weeks: 25,
            test_weeks: 14,
            budget_fraction: 0.03,
            threshold: 0.25,
            horizon: 14,
            ibl: IblParams::default(),
            online_ibl: true,
            lstm: LstmConfig::default(),
            cohort: CohortSpec::default(),
            input: None,
            out_dir: PathBuf::from("runs"),
            counterfactual: CounterfactualMode::ExactSynthetic,
            cluster: ClusterSettings::default(),
            gradcheck: GradcheckSettings::default(),
            format: Format::Csv,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that does not depend on the loaded cohort; see
    /// [`RunConfig::check_length`] for the rest.
    pub fn validate(&self) -> Result<()> {
        if self.train_weeks == 0 || self.test_weeks == 0 {
            return Err(Error::config("train_weeks and test_weeks must be positive"));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction < 1.0) {
            return Err(Error::config(format!(
                "budget_fraction {} must lie in (0, 1)",
                self.budget_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold must lie in [0, 1]"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        self.ibl.validate()?;
        self.lstm.validate()?;
        if self.input.is_none() {
            self.cohort.mix.validate()?;
        }
        if self.cluster.k < 1 || self.cluster.k_min > self.cluster.k_max {
            return Err(Error::config("cluster k settings are inconsistent"));
        }
        Ok(())
    }

    /// `train_weeks + test_weeks` must fit in every trajectory.
    pub fn check_length(&self, weeks: usize) -> Result<()> {
        if self.train_weeks + self.test_weeks > weeks {
            return Err(Error::config(format!(
                "train_weeks + test_weeks = {} exceeds trajectory length {weeks}",
                self.train_weeks + self.test_weeks
            )));
        }
        Ok(())
    }

    pub fn cohort_spec(&self) -> CohortSpec {
        CohortSpec {
            seed: self.seed,
            ..self.cohort.clone()
        }
    }
}
