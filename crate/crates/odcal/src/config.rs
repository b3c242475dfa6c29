//! Run configuration: one TOML file describing a whole run.
//!
//! Every section is optional and falls back to the full-scale defaults
//! (30-minute horizon, 300 vehicles, four OD pairs on the Nguyen-Dupuis
//! network). Relative paths inside the file are resolved against the
//! current working directory; the truth files default to conventional
//! names inside the output directory so the subcommands chain without
//! explicit wiring.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BoConfig;
use crate::env::{EnvConfig, EnvError, GroundTruthTable, Trajectory};
use crate::experiments::MethodKind;
use crate::microsim::CarFollowingParams;
use crate::network::{build_nguyen_dupuis, read_network, NetworkError, NetworkSpec};
use crate::ppo::PpoConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing input {path}; run gen-truth first")]
    MissingInput { path: PathBuf },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkSource {
    Builtin,
    File,
}

/// Where the network comes from: the built-in Nguyen-Dupuis graph (with a
/// length scale in meters per unit cost) or a TOML network file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub source: NetworkSource,
    /// Link length multiplier for the builtin network, meters per cost unit.
    pub scale: f64,
    /// Network file path; required when `source = "file"`.
    pub path: Option<PathBuf>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { source: NetworkSource::Builtin, scale: 3.0, path: None }
    }
}

/// Episode timing and discount; mirrors the corresponding EnvConfig fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub sim_dt: f64,
    pub steps_per_input: u32,
    pub t_steps: u32,
    pub inputs_per_output: u32,
    pub gamma: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection { sim_dt: 1.0, steps_per_input: 5, t_steps: 360, inputs_per_output: 60, gamma: 0.995 }
    }
}

/// Ground-truth demand: how many vehicles to draw, and optionally where the
/// generated files live. Unset paths default to `truth_od.csv` and
/// `truth_table.csv` inside the output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSection {
    pub total_vehicles: u64,
    pub trajectory: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

impl Default for TruthSection {
    fn default() -> Self {
        TruthSection { total_vehicles: 300, trajectory: None, table: None }
    }
}

/// Method comparison settings for `run-plan` and `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub methods: Vec<MethodKind>,
    pub repetitions: u32,
    /// Simulator evaluations granted to every method repetition.
    pub budget: u32,
    /// Significance level for the per-detector comparison.
    pub alpha: f64,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection {
            methods: MethodKind::ALL.to_vec(),
            repetitions: 5,
            budget: 2000,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every component derives named substreams from it.
    pub seed: u64,
    /// Output directory; the `--out` flag overrides it.
    pub out: PathBuf,
    pub network: NetworkSection,
    pub env: EnvSection,
    pub car_following: CarFollowingParams,
    pub truth: TruthSection,
    pub ppo: PpoConfig,
    pub bo: BoConfig,
    pub plan: PlanSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out: PathBuf::from("out"),
            network: NetworkSection::default(),
            env: EnvSection::default(),
            car_following: CarFollowingParams::default(),
            truth: TruthSection::default(),
            ppo: PpoConfig::default(),
            bo: BoConfig::default(),
            plan: PlanSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.network.source == NetworkSource::File && self.network.path.is_none() {
            return Err(ConfigError::Invalid(
                "network.source = \"file\" needs network.path".into(),
            ));
        }
        if self.network.source == NetworkSource::Builtin
            && !(self.network.scale > 0.0 && self.network.scale.is_finite())
        {
            return Err(ConfigError::Invalid("network.scale must be positive".into()));
        }
        if self.plan.repetitions == 0 || self.plan.budget == 0 {
            return Err(ConfigError::Invalid("plan needs repetitions and budget above zero".into()));
        }
        if !(self.plan.alpha > 0.0 && self.plan.alpha < 1.0) {
            return Err(ConfigError::Invalid("plan.alpha must lie strictly inside (0, 1)".into()));
        }
        Ok(())
    }

    pub fn build_network(&self) -> Result<NetworkSpec, ConfigError> {
        match self.network.source {
            NetworkSource::Builtin => Ok(build_nguyen_dupuis(self.network.scale)),
            NetworkSource::File => {
                let path = self.network.path.as_ref().expect("validated");
                Ok(read_network(path)?)
            }
        }
    }

    /// Assembles the environment around a ground-truth table. The config is
    /// validated as a whole so errors surface before any simulation.
    pub fn env_config(&self, ground_truth: GroundTruthTable) -> Result<Arc<EnvConfig>, ConfigError> {
        let cfg = EnvConfig {
            network: self.build_network()?,
            car_following: self.car_following,
            sim_dt: self.env.sim_dt,
            steps_per_input: self.env.steps_per_input,
            t_steps: self.env.t_steps,
            inputs_per_output: self.env.inputs_per_output,
            gamma: self.env.gamma,
            ground_truth,
        };
        cfg.validate()?;
        Ok(Arc::new(cfg))
    }

    /// Environment shell with an all-zero truth table, for commands that
    /// run before (or without) ground truth.
    pub fn env_config_zero_truth(&self) -> Result<Arc<EnvConfig>, ConfigError> {
        let network = self.build_network()?;
        let k = (self.env.t_steps / self.env.inputs_per_output.max(1)) as usize;
        let table = GroundTruthTable::zeros(k, network.n_detectors());
        self.env_config(table)
    }

    /// Path of the truth trajectory CSV, honoring the configured override.
    pub fn truth_trajectory_path(&self, out: &Path) -> PathBuf {
        self.truth.trajectory.clone().unwrap_or_else(|| out.join("truth_od.csv"))
    }

    /// Path of the truth table CSV, honoring the configured override.
    pub fn truth_table_path(&self, out: &Path) -> PathBuf {
        self.truth.table.clone().unwrap_or_else(|| out.join("truth_table.csv"))
    }

    /// Loads the ground-truth pair written by `gen-truth`, distinguishing
    /// missing files (a sequencing error) from unreadable ones.
    pub fn load_truth(
        &self,
        out: &Path,
    ) -> Result<(Trajectory, GroundTruthTable), ConfigError> {
        let network = self.build_network()?;
        let open = |path: PathBuf| -> Result<fs::File, ConfigError> {
            fs::File::open(&path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    ConfigError::MissingInput { path }
                } else {
                    ConfigError::Read { path, source: e }
                }
            })
        };
        let trajectory =
            Trajectory::read_csv(&network, open(self.truth_trajectory_path(out))?)?;
        let table = GroundTruthTable::read_csv(&network, open(self.truth_table_path(out))?)?;
        Ok((trajectory, table))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_full_scale_default() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.env.t_steps, 360);
        assert_eq!(cfg.truth.total_vehicles, 300);
        assert_eq!(cfg.plan.methods.len(), 6);
        let env = cfg.env_config_zero_truth().unwrap();
        assert_eq!(env.obs_dim(), 48);
        assert_eq!(env.k_intervals(), 6);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            out = "elsewhere"

            [env]
            t_steps = 180
            inputs_per_output = 60

            [truth]
            total_vehicles = 150

            [plan]
            methods = ["rl-ppo", "st-bo-5min"]
            repetitions = 3
            budget = 320

            [ppo]
            hidden_dim = 32

            [bo]
            max_count = 10
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.env.t_steps, 180);
        assert_eq!(cfg.plan.methods, vec![MethodKind::RlPpo, MethodKind::StBo5Min]);
        assert_eq!(cfg.ppo.hidden_dim, 32);
        assert_eq!(cfg.bo.max_count, 10);
        let env = cfg.env_config_zero_truth().unwrap();
        assert_eq!(env.k_intervals(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 7").is_err());
        assert!(toml::from_str::<RunConfig>("[env]\nstep = 1").is_err());
    }

    #[test]
    fn file_source_requires_a_path() {
        let cfg: RunConfig = toml::from_str("[network]\nsource = \"file\"").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn truth_paths_default_into_the_out_dir() {
        let cfg = RunConfig::default();
        let out = Path::new("runs/a");
        assert_eq!(cfg.truth_trajectory_path(out), Path::new("runs/a/truth_od.csv"));
        assert_eq!(cfg.truth_table_path(out), Path::new("runs/a/truth_table.csv"));

        let over: RunConfig =
            toml::from_str("[truth]\ntrajectory = \"t.csv\"\ntable = \"d.csv\"").unwrap();
        assert_eq!(over.truth_trajectory_path(out), Path::new("t.csv"));
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.plan.methods, cfg.plan.methods);
        assert_eq!(back.env.gamma, cfg.env.gamma);
    }
}
