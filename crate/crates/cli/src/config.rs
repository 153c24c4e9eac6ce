//! Run configuration, read from JSON.

use std::path::{Path, PathBuf};

use kam_core::iteration::ScheduleOptions;
use kam_core::verify::FlowOptions;
use kam_core::FourierTaylorSeries;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where the Hamiltonian `f0(r) + eps f1(r, theta)` comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    /// A built-in model; see [`crate::presets`].
    Preset {
        name: String,
        #[serde(default = "default_twist")]
        twist: f64,
    },
    /// Explicit series in the `FourierTaylorSeries` JSON schema.
    Series {
        f0: FourierTaylorSeries,
        f1: FourierTaylorSeries,
    },
}

fn default_twist() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truncation {
    pub fourier: u32,
    pub taylor: u32,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            fourier: 16,
            taylor: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub rho: f64,
    pub delta: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            delta: 1.0,
        }
    }
}

/// Acceptance thresholds for the verification oracles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub freq_err: f64,
    pub angle_dep_err: f64,
    pub flow_dist: f64,
    pub rotation_err: f64,
    pub sympl_defect: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            freq_err: 1e-8,
            angle_dep_err: 1e-8,
            flow_dist: 1e-6,
            rotation_err: 1e-6,
            sympl_defect: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Grid points per axis for the conjugacy check; 0 picks 64 for d = 1
    /// and 16 otherwise.
    pub grid: usize,
    /// Finite-difference step relative to `rho`.
    pub fd_step: f64,
    pub flow: FlowOptions,
    /// Starting angle of the trajectory (defaults to 0.3 on every axis).
    pub theta0: Option<Vec<f64>>,
    pub symplectic_samples: usize,
    pub thresholds: Thresholds,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            grid: 0,
            fd_step: 1e-5,
            flow: FlowOptions::default(),
            theta0: None,
            symplectic_samples: 100,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub hamiltonian: HamiltonianSpec,
    pub omega: Vec<f64>,
    pub epsilon: f64,
    /// Diophantine exponent; defaults to `d`.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Depth of the resonance scan; defaults to the Fourier cutoff.
    #[serde(default)]
    pub kmax: Option<u32>,
    /// Truncation; presets default to `K = 16, M = 4`, explicit series keep
    /// their own unless given.
    #[serde(default)]
    pub truncation: Option<Truncation>,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default)]
    pub schedule: ScheduleOptions,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, message: String| {
            Err(CliError::Config {
                field: field.into(),
                message,
            })
        };
        if self.omega.is_empty() {
            return bad("omega", "must not be empty".into());
        }
        if self.omega.iter().any(|w| !w.is_finite()) {
            return bad("omega", "entries must be finite".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(
                "epsilon",
                format!("must be finite and non-negative, got {}", self.epsilon),
            );
        }
        if let Some(tau) = self.tau {
            if !tau.is_finite() {
                return bad("tau", "must be finite".into());
            }
        }
        if !(self.domain.rho > 0.0 && self.domain.delta > 0.0) {
            return bad("domain", "rho and delta must be positive".into());
        }
        if let Some(t) = self.truncation {
            if t.taylor < 2 {
                return bad("truncation.taylor", "must be at least 2".into());
            }
        }
        if let HamiltonianSpec::Series { f0, f1 } = &self.hamiltonian {
            if f0.dim() != self.dim() || f1.dim() != self.dim() {
                return bad(
                    "hamiltonian.series",
                    format!("series dimension does not match omega (d = {})", self.dim()),
                );
            }
        }
        if !(self.verify.fd_step > 0.0) {
            return bad("verify.fd_step", "must be positive".into());
        }
        Ok(())
    }
}

/// Parses and validates a configuration from JSON text.
pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let field = match missing_field(&message) {
            Some(name) if path == "." => name.to_string(),
            Some(name) => format!("{path}.{name}"),
            None => path,
        };
        CliError::Config { field, message }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}
