//! Scenario files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use socnet_core::kernels::KernelsConfig;
use socnet_core::meanfield::SolverConfig;
use socnet_core::observables::TestFunction;
use socnet_core::{Model, RunConfig};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub kernels: Option<KernelsConfig>,
    pub run: RunConfig,
    #[serde(default)]
    pub meanfield: Option<SolverConfig>,
    #[serde(default)]
    pub observe: ObserveConfig,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveConfig {
    /// Times at which each test function is paired with the configuration.
    #[serde(default)]
    pub output_times: Vec<f64>,
    #[serde(rename = "L_obs", default = "default_l_obs")]
    pub l_obs: usize,
    #[serde(default)]
    pub test_functions: Vec<TestFunction>,
    /// Times at which state snapshots and histograms are written.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Edge radius for graph exports; defaults to `a_f`.
    #[serde(default)]
    pub graph_radius: Option<f64>,
}

impl Default for ObserveConfig {
    fn default() -> Self {
        ObserveConfig {
            output_times: Vec::new(),
            l_obs: default_l_obs(),
            test_functions: Vec::new(),
            snapshot_times: Vec::new(),
            graph_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub n_values: Vec<usize>,
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(rename = "L_obs", default)]
    pub l_obs: Option<usize>,
    #[serde(default)]
    pub replicas: Option<usize>,
}

fn one() -> usize {
    1
}

fn default_l_obs() -> usize {
    20
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.run.seed = seed;
        }
        if let Some(r) = o.replicas {
            self.replicas = r;
            if let Some(c) = self.compare.as_mut() {
                c.replicas = Some(r);
            }
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
    }

    pub fn model(&self) -> CliResult<Model> {
        self.run.model()?;
        Ok(Model::from_config(
            self.run.geometry,
            self.run.params,
            self.kernels.as_ref(),
        )?)
    }

    /// Every invariant of the scenario, all violations reported together.
    pub fn validate(&self) -> CliResult<()> {
        let mut bad = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            bad.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.replicas < 1 {
            bad.push("replicas must be >= 1".to_string());
        }
        if let Err(e) = self.model() {
            bad.push(e.to_string());
        }
        let horizon = self.run.time_horizon.unwrap_or(f64::INFINITY);
        let o = &self.observe;
        for (what, times) in [("output time", &o.output_times), ("snapshot time", &o.snapshot_times)] {
            for t in times {
                if !(t.is_finite() && *t >= 0.0 && *t <= horizon) {
                    bad.push(format!("{what} {t} outside [0, horizon]"));
                }
            }
            if times.windows(2).any(|w| w[0] >= w[1]) {
                bad.push(format!("{what}s must be strictly increasing"));
            }
        }
        if o.l_obs < 1 {
            bad.push("L_obs must be >= 1".to_string());
        }
        if let Some(r) = o.graph_radius {
            if !(r.is_finite() && r > 0.0) {
                bad.push(format!("graph_radius must be > 0, got {r}"));
            }
        }
        for f in &o.test_functions {
            if let Err(e) = f.validate(&self.run.geometry) {
                bad.push(e.to_string());
            }
        }
        if let Some(mf) = &self.meanfield {
            if let Err(e) = mf.validate() {
                bad.push(e.to_string());
            }
        }
        if let Some(c) = &self.compare {
            if c.n_values.is_empty() || c.n_values.contains(&0) {
                bad.push("compare.n_values must be a non-empty list of sizes >= 1".to_string());
            }
            if !(c.t_end.is_finite() && c.t_end >= 0.0) {
                bad.push(format!("compare.T must be finite and >= 0, got {}", c.t_end));
            }
            if c.replicas == Some(0) {
                bad.push("compare.replicas must be >= 1".to_string());
            }
            match c.l_obs {
                Some(0) => bad.push("compare.L_obs must be >= 1".to_string()),
                Some(l) if l != o.l_obs => {
                    bad.push(format!("mismatched L_obs: compare uses {l}, observe uses {}", o.l_obs))
                }
                _ => {}
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad.join("; ")))
        }
    }

    /// Output directory: the override, the config's `out_dir`, or
    /// `out/<name>`.
    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out").join(self.name.as_deref().unwrap_or("scenario")))
    }
}
