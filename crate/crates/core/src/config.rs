//! Experiment configuration: a TOML file mirroring the pipeline's knobs.
//!
//! ```toml
//! [dataset]
//! path = "data/ml-100k/u.data"
//! format = "movielens-tsv"        # or "pair-csv" (+ header = true)
//!
//! [experiment]
//! train_fraction = 0.8            # attacker-observed / training split
//! cf_fraction = 0.6               # share of interactions covered by CFs
//! k = 10
//! num_targets = 5
//! budgets_pct = [1.0, 3.0, 5.0]   # controlled users, % of user count
//! seeds = [1, 2, 3]
//! methods = ["hcars", "bandwagon"]
//! ablate_cf = false               # also train the no-CF surrogate
//! measure_shift_condition = false # retrain surrogate per attack cell
//! fidelity_users = 200            # user sample for P@k
//!
//! [target]      # victim training (see TargetTrainConfig)
//! [surrogate]   # extraction (see SurrogateTrainConfig)
//! [explainer]   # CF generation (see ExplainerConfig)
//! [attack]      # crafting hyperparameters (see AttackConfig)
//! ```
//!
//! Seeds, targets, and budgets inside the section structs are filled in per
//! experiment cell; values given for them in the file are ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::DataFormat;
use crate::error::{Error, Result};
use crate::explainer::ExplainerConfig;
use crate::surrogate::SurrogateTrainConfig;
use crate::target::TargetTrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default)]
    pub header: bool,
}

fn default_format() -> String {
    "movielens-tsv".to_string()
}

impl DatasetConfig {
    pub fn data_format(&self) -> Result<DataFormat> {
        match self.format.as_str() {
            "movielens-tsv" => Ok(DataFormat::MovielensTsv),
            "pair-csv" => Ok(DataFormat::PairCsv {
                header: self.header,
            }),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Hcars,
    Bandwagon,
    Random,
}

impl AttackMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMethod::Hcars => "hcars",
            AttackMethod::Bandwagon => "bandwagon",
            AttackMethod::Random => "random",
        }
    }
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hcars" => Ok(AttackMethod::Hcars),
            "bandwagon" => Ok(AttackMethod::Bandwagon),
            "random" => Ok(AttackMethod::Random),
            other => Err(Error::Config(format!("unknown attack method {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub train_fraction: f64,
    pub cf_fraction: f64,
    pub k: usize,
    pub num_targets: usize,
    pub budgets_pct: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<AttackMethod>,
    pub ablate_cf: bool,
    pub measure_shift_condition: bool,
    pub fidelity_users: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            train_fraction: 0.8,
            cf_fraction: 0.6,
            k: 10,
            num_targets: 5,
            budgets_pct: vec![0.5, 1.0, 3.0, 5.0],
            seeds: vec![1, 2, 3],
            methods: vec![
                AttackMethod::Hcars,
                AttackMethod::Bandwagon,
                AttackMethod::Random,
            ],
            ablate_cf: false,
            measure_shift_condition: false,
            fidelity_users: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub target: TargetTrainConfig,
    #[serde(default)]
    pub surrogate: SurrogateTrainConfig,
    #[serde(default)]
    pub explainer: ExplainerConfig,
    #[serde(default)]
    pub attack: AttackConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path.as_ref())?)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if !(e.train_fraction > 0.0 && e.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0,1), got {}",
                e.train_fraction
            )));
        }
        if !(e.cf_fraction > 0.0 && e.cf_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "cf_fraction must be in (0,1], got {}",
                e.cf_fraction
            )));
        }
        if e.k == 0 || e.num_targets == 0 {
            return Err(Error::Config("k and num_targets must be positive".into()));
        }
        if e.budgets_pct.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("budget percentages must be positive".into()));
        }
        if e.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        self.target.validate()?;
        self.surrogate.validate()?;
        Ok(())
    }

    /// Fingerprint over everything that shapes cached per-seed artifacts.
    /// Budgets, seeds, and method lists are excluded so sweeps can extend a
    /// directory; the rest must match exactly.
    pub fn artifact_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            dataset: &'a DatasetConfig,
            train_fraction: f64,
            cf_fraction: f64,
            k: usize,
            num_targets: usize,
            fidelity_users: usize,
            target: &'a TargetTrainConfig,
            surrogate: &'a SurrogateTrainConfig,
            explainer: &'a ExplainerConfig,
            attack: &'a AttackConfig,
        }
        serde_json::to_string(&Fingerprint {
            dataset: &self.dataset,
            train_fraction: self.experiment.train_fraction,
            cf_fraction: self.experiment.cf_fraction,
            k: self.experiment.k,
            num_targets: self.experiment.num_targets,
            fidelity_users: self.experiment.fidelity_users,
            target: &self.target,
            surrogate: &self.surrogate,
            explainer: &self.explainer,
            attack: &self.attack,
        })
        .expect("config serializes")
    }
}
