//! Run configuration: JSON, parsed with field paths in every error.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Grw,
    Fock,
    Multitime,
    Relativistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatisticsKind {
    Fermion,
    Boson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    pub points: usize,
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub half_width: f64,
    pub dx: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelKind,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    pub sigma: f64,
    pub tau: f64,
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default)]
    pub momentum_cutoff: Option<f64>,
    #[serde(default)]
    pub modes: Option<usize>,
    #[serde(default = "one_usize")]
    pub particles: usize,
    #[serde(default)]
    pub statistics: Option<StatisticsKind>,
    #[serde(default)]
    pub n_max: Option<usize>,
    /// Seed points `[t, x]`, one per particle type (relativistic).
    #[serde(default)]
    pub seeds: Vec<[f64; 2]>,
    pub initial_state: InitialState,
    pub horizon: f64,
    pub trajectories: usize,
    #[serde(default = "sample")]
    pub experiment: String,
    /// Parameters of a named experiment; missing fields take its defaults.
    #[serde(default)]
    pub experiment_params: serde_json::Value,
    #[serde(default)]
    pub window: Option<WindowConfig>,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn sample() -> String {
    "sample".into()
}

/// A rejected configuration, with the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.reason)
    }
}

impl std::error::Error for ConfigError {}

pub fn field_error(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), reason: reason.into() }
}

pub const EXPERIMENTS: &[(&str, &str, &str)] = &[
    ("sample", "grw, fock, multitime, relativistic", "sample flash histories up to the horizon"),
    ("waiting-times", "grw", "first waiting times per type against Exp(tau)"),
    ("covariance", "multitime", "shift system 0 ahead and compare conditional densities"),
    ("time-dilation", "relativistic", "flash rate of a moving packet per coordinate time"),
    ("nonrel-limit", "relativistic", "first-flash law of a heavy slow packet against lattice GRW"),
    ("povm", "relativistic", "total first-flash probability under mesh refinement"),
    ("non-autonomy", "relativistic", "search for states whose ensembles agree on one surface only"),
];

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            // syntax errors and missing top-level fields have no path
            let field = if path == "." || path == "?" { "<document>".to_string() } else { path };
            field_error(field, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        positive("sigma", self.sigma)?;
        positive("tau", self.tau)?;
        positive("mass", self.mass)?;
        finite("horizon", self.horizon)?;
        if self.horizon < 0.0 {
            return Err(field_error("horizon", "must not be negative"));
        }
        if self.particles == 0 {
            return Err(field_error("particles", "must be at least 1"));
        }
        if let Some(g) = &self.grid {
            if g.d == 0 {
                return Err(field_error("grid.d", "must be at least 1"));
            }
            if g.points < 2 {
                return Err(field_error("grid.points", "need at least 2 points per axis"));
            }
            positive("grid.spacing", g.spacing)?;
        }
        if let Some(c) = self.momentum_cutoff {
            positive("momentum_cutoff", c)?;
        }
        if self.modes == Some(0) {
            return Err(field_error("modes", "must be at least 1"));
        }
        if let Some(w) = &self.window {
            positive("window.half_width", w.half_width)?;
            positive("window.dx", w.dx)?;
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if !s.iter().all(|v| v.is_finite()) {
                return Err(field_error(format!("seeds[{i}]"), "coordinates must be finite"));
            }
        }
        for (k, v) in &self.tolerances {
            positive(&format!("tolerances.{k}"), *v)?;
        }
        match EXPERIMENTS.iter().find(|e| e.0 == self.experiment) {
            None => return Err(field_error("experiment", format!("unknown experiment `{}`; see list-experiments", self.experiment))),
            Some(e) if !e.1.split(", ").any(|m| m == self.model_name()) => {
                return Err(field_error("experiment", format!("`{}` runs on model {}, not {}", e.0, e.1, self.model_name())));
            }
            _ => {}
        }
        match self.model {
            ModelKind::Grw | ModelKind::Multitime | ModelKind::Fock => {
                if self.grid.is_none() {
                    return Err(field_error("grid", "required for lattice models"));
                }
            }
            ModelKind::Relativistic => {
                if self.particles > 2 {
                    return Err(field_error("particles", "relativistic runs take one or two particles"));
                }
                if !self.seeds.is_empty() && self.seeds.len() != self.particles {
                    return Err(field_error("seeds", format!("need one seed per particle type ({})", self.particles)));
                }
            }
        }
        if self.model == ModelKind::Fock {
            if self.statistics.is_none() {
                return Err(field_error("statistics", "required for the fock model"));
            }
            if self.grid.as_ref().is_some_and(|g| g.d != 1) {
                return Err(field_error("grid.d", "the fock model is one-dimensional"));
            }
        }
        if self.model == ModelKind::Multitime && self.particles < 2 {
            return Err(field_error("particles", "multitime runs need at least two systems"));
        }
        Ok(())
    }

    pub fn model_name(&self) -> &'static str {
        match self.model {
            ModelKind::Grw => "grw",
            ModelKind::Fock => "fock",
            ModelKind::Multitime => "multitime",
            ModelKind::Relativistic => "relativistic",
        }
    }

    pub fn tolerance(&self, name: &str, default: f64) -> f64 {
        self.tolerances.get(name).copied().unwrap_or(default)
    }
}

fn finite(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(field_error(field, "must be finite"))
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(field_error(field, format!("must be positive and finite, got {v}")))
    }
}

/// Reads a typed parameter block, naming fields relative to `prefix`.
pub fn params<P: serde::de::DeserializeOwned + Default>(prefix: &str, value: &serde_json::Value) -> Result<P, ConfigError> {
    if value.is_null() {
        return Ok(P::default());
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { prefix.to_string() } else { format!("{prefix}.{path}") };
        field_error(field, e.inner().to_string())
    })
}
