//! Run configuration: JSON with defaults for every key, unknown keys rejected.

use std::path::{Path, PathBuf};

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use safeguard_core::backup_flow::FlowSettings;
use safeguard_core::linear_control::CertificationSettings;
use safeguard_core::{EpsilonProvider, ErrorModel, LqrWeights, SafeSetSpec, State, StateBox, SynthesisSettings};

use crate::sim::{Controller, PdGains, ScenarioConfig, VelocityProfile};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed JSON, wrong types or unknown keys.
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    /// Well-formed but out of range; `key` is the offending key path.
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid { key: key.into(), message: message.into() }
    }

    pub fn from_json(path: &Path, e: serde_json::Error) -> Self {
        ConfigError::Parse { path: path.to_path_buf(), line: e.line(), column: e.column(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorModelConfig {
    Identity,
    ConstantBias { bias: [f64; 4] },
    BoundedUniform { radius: f64, seed: u64 },
}

impl Default for ErrorModelConfig {
    fn default() -> Self {
        ErrorModelConfig::Identity
    }
}

impl ErrorModelConfig {
    pub fn to_model(&self) -> ErrorModel {
        match *self {
            ErrorModelConfig::Identity => ErrorModel::Identity,
            ErrorModelConfig::ConstantBias { bias } => ErrorModel::ConstantBias(Vector4::from(bias)),
            ErrorModelConfig::BoundedUniform { radius, seed } => ErrorModel::BoundedUniform { radius, seed },
        }
    }
}

/// Velocity command `v` from time `t` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityStep {
    pub t: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub lqr_state_weights: [f64; 4],
    pub lqr_input_weight: f64,
    pub lyapunov_weights: [f64; 4],
    pub certification_samples: usize,
    pub certification_seed: u64,
    pub horizon: f64,
    pub dt_int: f64,
    pub n_constraints: usize,
    pub gamma: f64,
    pub lipschitz_samples: usize,
    pub lipschitz_seed: u64,
    pub inflation: f64,
    /// Sampling box for Lipschitz constants and the backup speed; derived
    /// from the backup set when absent.
    pub sample_box: Option<BoxConfig>,
    /// Axes the Lipschitz constants are taken along; derived from the error
    /// model when absent.
    pub error_axes: Option<Vec<usize>>,
    pub projected_speed: bool,
    pub slack_weight: f64,
    pub solver_tol: f64,
    /// Bundle JSON used instead of the sampled estimate.
    pub lipschitz_file: Option<PathBuf>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        let s = SynthesisSettings::default();
        Self {
            lqr_state_weights: s.weights.state,
            lqr_input_weight: s.weights.input,
            lyapunov_weights: s.lyapunov_weights,
            certification_samples: s.certification.n_samples,
            certification_seed: s.certification.seed,
            horizon: s.flow.horizon,
            dt_int: s.flow.dt_int,
            n_constraints: s.flow.n_constraints,
            gamma: s.gamma,
            lipschitz_samples: s.n_samples,
            lipschitz_seed: s.seed,
            inflation: s.inflation,
            sample_box: None,
            error_axes: None,
            projected_speed: s.projected_speed,
            slack_weight: s.slack_weight,
            solver_tol: s.solver_tol,
            lipschitz_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Segway parameter JSON; nominal parameters when absent.
    pub params_file: Option<PathBuf>,
    pub controller: Controller,
    pub error_model: ErrorModelConfig,
    pub epsilon: f64,
    pub v_desired: Vec<VelocityStep>,
    pub duration: f64,
    pub control_rate: f64,
    pub truth_dt: f64,
    pub initial_state: [f64; 4],
    /// `(k_p, k_pitch, k_pitch_rate)` of the nominal controller.
    pub pd_gains: [f64; 3],
    pub seed: u64,
    pub x_max: f64,
    pub synthesis: SynthesisConfig,
    /// Synthesis cache JSON; read when it matches, rewritten otherwise.
    pub cache: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Directory relative paths resolve against; the config file's own.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pd = PdGains::default();
        Self {
            params_file: None,
            controller: Controller::MrBsOp,
            error_model: ErrorModelConfig::Identity,
            epsilon: 0.4,
            v_desired: vec![VelocityStep { t: 0.0, v: 1.0 }],
            duration: 8.0,
            control_rate: 250.0,
            truth_dt: 1e-3,
            initial_state: [0.0; 4],
            pd_gains: [pd.velocity, pd.pitch, pd.pitch_rate],
            seed: 0,
            x_max: SafeSetSpec::default().x_max,
            synthesis: SynthesisConfig::default(),
            cache: None,
            output_dir: PathBuf::from("out"),
            base_dir: PathBuf::new(),
        }
    }
}

fn finite(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, "must be finite"))
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError::from_json(path, e))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Resolves a config-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("duration", self.duration)?;
        positive("control_rate", self.control_rate)?;
        positive("truth_dt", self.truth_dt)?;
        let ratio = 1.0 / (self.control_rate * self.truth_dt);
        if ratio.round() < 1.0 || (ratio - ratio.round()).abs() * self.truth_dt > 1e-9 {
            return Err(ConfigError::invalid("truth_dt", "control period must be a whole number of truth_dt steps"));
        }
        positive("x_max", self.x_max)?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(ConfigError::invalid("epsilon", "must be finite and non-negative"));
        }
        match self.error_model {
            ErrorModelConfig::Identity => {}
            ErrorModelConfig::ConstantBias { bias } => {
                bias.iter().try_for_each(|b| finite("error_model.bias", *b))?;
            }
            ErrorModelConfig::BoundedUniform { radius, .. } => {
                if !(radius >= 0.0 && radius.is_finite()) {
                    return Err(ConfigError::invalid("error_model.radius", "must be finite and non-negative"));
                }
            }
        }
        if EpsilonProvider::Constant(self.epsilon).validate_against(&self.error_model.to_model()).is_err() {
            return Err(ConfigError::invalid("epsilon", "must bound the error model's largest error norm"));
        }
        if self.v_desired.iter().any(|s| !s.t.is_finite() || !s.v.is_finite()) {
            return Err(ConfigError::invalid("v_desired", "entries must be finite"));
        }
        if self.v_desired.windows(2).any(|w| w[0].t >= w[1].t) {
            return Err(ConfigError::invalid("v_desired", "step times must be strictly increasing"));
        }
        self.initial_state.iter().try_for_each(|v| finite("initial_state", *v))?;
        self.pd_gains.iter().try_for_each(|v| finite("pd_gains", *v))?;
        self.validate_synthesis()?;
        for (key, file) in [("params_file", &self.params_file), ("synthesis.lipschitz_file", &self.synthesis.lipschitz_file)] {
            if let Some(f) = file {
                if !self.resolve(f).is_file() {
                    return Err(ConfigError::invalid(key, format!("file {} does not exist", f.display())));
                }
            }
        }
        Ok(())
    }

    fn validate_synthesis(&self) -> Result<(), ConfigError> {
        let s = &self.synthesis;
        for w in s.lqr_state_weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(ConfigError::invalid("synthesis.lqr_state_weights", "must be finite and non-negative"));
            }
        }
        positive("synthesis.lqr_input_weight", s.lqr_input_weight)?;
        s.lyapunov_weights.iter().try_for_each(|w| positive("synthesis.lyapunov_weights", *w))?;
        if s.certification_samples == 0 {
            return Err(ConfigError::invalid("synthesis.certification_samples", "must be positive"));
        }
        positive("synthesis.horizon", s.horizon)?;
        positive("synthesis.dt_int", s.dt_int)?;
        if s.n_constraints < 2 {
            return Err(ConfigError::invalid("synthesis.n_constraints", "must be at least 2"));
        }
        if self.flow_settings().validate().is_err() {
            return Err(ConfigError::invalid("synthesis.dt_int", "horizon must be a whole number of dt_int steps"));
        }
        positive("synthesis.gamma", s.gamma)?;
        if s.lipschitz_samples < 100 {
            return Err(ConfigError::invalid("synthesis.lipschitz_samples", "must be at least 100"));
        }
        if !(s.inflation >= 1.0 && s.inflation.is_finite()) {
            return Err(ConfigError::invalid("synthesis.inflation", "must be at least 1"));
        }
        if let Some(b) = s.sample_box {
            if !self.state_box(&b).is_non_degenerate() {
                return Err(ConfigError::invalid("synthesis.sample_box", "every side must have positive length"));
            }
        }
        if let Some(axes) = &s.error_axes {
            if axes.is_empty() || axes.iter().any(|a| *a >= 4) {
                return Err(ConfigError::invalid("synthesis.error_axes", "must list state axes 0..3"));
            }
        }
        positive("synthesis.slack_weight", s.slack_weight)?;
        if !(1e-10..=1e-6).contains(&s.solver_tol) {
            return Err(ConfigError::invalid("synthesis.solver_tol", "must lie in [1e-10, 1e-6]"));
        }
        Ok(())
    }

    fn state_box(&self, b: &BoxConfig) -> StateBox {
        StateBox::new(Vector4::from(b.lo), Vector4::from(b.hi))
    }

    pub fn safe_set(&self) -> SafeSetSpec {
        SafeSetSpec { x_max: self.x_max }
    }

    pub fn flow_settings(&self) -> FlowSettings {
        let s = &self.synthesis;
        FlowSettings { horizon: s.horizon, dt_int: s.dt_int, n_constraints: s.n_constraints }
    }

    pub fn synthesis_settings(&self) -> SynthesisSettings {
        let s = &self.synthesis;
        let support = self.error_model.to_model().support_axes();
        let error_axes = match &s.error_axes {
            Some(a) => a.clone(),
            None if support.is_empty() => vec![0],
            None => support,
        };
        SynthesisSettings {
            weights: LqrWeights { state: s.lqr_state_weights, input: s.lqr_input_weight },
            lyapunov_weights: s.lyapunov_weights,
            certification: CertificationSettings {
                n_samples: s.certification_samples,
                seed: s.certification_seed,
                ..CertificationSettings::default()
            },
            flow: self.flow_settings(),
            gamma: s.gamma,
            sample_box: s.sample_box.map(|b| self.state_box(&b)),
            error_axes,
            n_samples: s.lipschitz_samples,
            seed: s.lipschitz_seed,
            inflation: s.inflation,
            projected_speed: s.projected_speed,
            epsilon: EpsilonProvider::Constant(self.epsilon),
            slack_weight: s.slack_weight,
            solver_tol: s.solver_tol,
        }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        let [x, v, p, r] = self.initial_state;
        let [kv, kp, kr] = self.pd_gains;
        ScenarioConfig {
            controller: self.controller,
            error_model: self.error_model.to_model(),
            epsilon: EpsilonProvider::Constant(self.epsilon),
            v_desired: VelocityProfile { steps: self.v_desired.iter().map(|s| (s.t, s.v)).collect() },
            duration: self.duration,
            control_rate: self.control_rate,
            truth_dt: self.truth_dt,
            initial_state: State::new(x, v, p, r),
            pd_gains: PdGains { velocity: kv, pitch: kp, pitch_rate: kr },
            seed: self.seed,
        }
    }
}
