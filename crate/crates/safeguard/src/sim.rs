//! Closed-loop simulation: rk4 ground truth at a fine step, the controller at
//! a fixed rate with zero-order hold, and measurement-error injection.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use safeguard_core::dynamics::{self, Integrator, State};
use safeguard_core::linear_control::translate_center;
use safeguard_core::robustness::{apply_measurement, EpsilonProvider, ErrorModel};
use safeguard_core::safety_filters::{filter_step, FilterKind, SolveStatus};
use safeguard_core::{FilterContext, SafeSetSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("log is empty")]
    EmptyLog,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    CbfQp,
    BsQp,
    MrBsOp,
    None,
}

impl Controller {
    pub fn filter_kind(&self) -> Option<FilterKind> {
        match self {
            Controller::CbfQp => Some(FilterKind::CbfQp),
            Controller::BsQp => Some(FilterKind::BsQp),
            Controller::MrBsOp => Some(FilterKind::MrBsOp),
            Controller::None => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Controller::CbfQp => "cbf_qp",
            Controller::BsQp => "bs_qp",
            Controller::MrBsOp => "mr_bs_op",
            Controller::None => "none",
        }
    }
}

/// Nominal velocity-tracking controller
/// `u_d = k_p (v_hat - v_des) + k_pitch psi_hat + k_pitch_rate psi_dot_hat`.
///
/// With positive pitch leaning forward and `u > 0` pitching the body back,
/// pitch feedback enters with a positive sign, and the velocity error enters
/// with the sign that first leans the body toward the commanded direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdGains {
    pub velocity: f64,
    pub pitch: f64,
    pub pitch_rate: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { velocity: 5.0, pitch: 300.0, pitch_rate: 40.0 }
    }
}

impl PdGains {
    pub fn command(&self, v_desired: f64, estimate: &State) -> f64 {
        self.velocity * (estimate.velocity - v_desired) + self.pitch * estimate.pitch + self.pitch_rate * estimate.pitch_rate
    }
}

/// Piecewise-constant velocity command: `(start_time, velocity)` steps sorted
/// by time. Before the first step the command is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityProfile {
    pub steps: Vec<(f64, f64)>,
}

impl VelocityProfile {
    pub fn constant(v: f64) -> Self {
        Self { steps: vec![(0.0, v)] }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.steps.iter().take_while(|(t0, _)| *t0 <= t).last().map_or(0.0, |s| s.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub controller: Controller,
    pub error_model: ErrorModel,
    pub epsilon: EpsilonProvider,
    pub v_desired: VelocityProfile,
    pub duration: f64,
    pub control_rate: f64,
    pub truth_dt: f64,
    pub initial_state: State,
    pub pd_gains: PdGains,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            controller: Controller::MrBsOp,
            error_model: ErrorModel::Identity,
            epsilon: EpsilonProvider::Constant(0.4),
            v_desired: VelocityProfile::constant(1.0),
            duration: 8.0,
            control_rate: 250.0,
            truth_dt: 1e-3,
            initial_state: State::default(),
            pd_gains: PdGains::default(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScenario(m.into()));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if !(self.control_rate > 0.0 && self.control_rate.is_finite()) {
            return bad("control_rate must be positive");
        }
        if !(self.truth_dt > 0.0 && self.truth_dt.is_finite()) {
            return bad("truth_dt must be positive");
        }
        let ratio = self.control_period() / self.truth_dt;
        if (ratio - ratio.round()).abs() * self.truth_dt > 1e-9 || ratio.round() < 1.0 {
            return bad("control period must be a whole number of truth_dt steps");
        }
        if !self.initial_state.is_finite() {
            return bad("initial_state must be finite");
        }
        // epsilon may undercut the error model on purpose, e.g. in sweeps
        let EpsilonProvider::Constant(eps) = self.epsilon;
        if !(eps >= 0.0 && eps.is_finite()) {
            return bad("epsilon must be finite and non-negative");
        }
        Ok(())
    }

    pub fn control_period(&self) -> f64 {
        1.0 / self.control_rate
    }

    pub fn substeps(&self) -> usize {
        (self.control_period() / self.truth_dt).round() as usize
    }

    pub fn n_ticks(&self) -> usize {
        (self.duration * self.control_rate).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickStatus {
    Optimal,
    Relaxed,
    Error,
    /// No filter in the loop.
    Open,
}

impl TickStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TickStatus::Optimal => "optimal",
            TickStatus::Relaxed => "relaxed",
            TickStatus::Error => "error",
            TickStatus::Open => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "optimal" => TickStatus::Optimal,
            "relaxed" => TickStatus::Relaxed,
            "error" => TickStatus::Error,
            "none" => TickStatus::Open,
            _ => return None,
        })
    }
}

impl From<SolveStatus> for TickStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Optimal => TickStatus::Optimal,
            SolveStatus::Relaxed => TickStatus::Relaxed,
            SolveStatus::Error => TickStatus::Error,
        }
    }
}

/// One control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub x_true: State,
    pub x_est: State,
    pub u_des: f64,
    pub u_applied: f64,
    pub slack: f64,
    pub status: TickStatus,
    pub h_true: f64,
    pub h_est: f64,
    /// `h_B` at the true state with the center translated to it.
    pub hb_true: f64,
    /// Trajectory-row margins `value - mu`, then the terminal value.
    pub margins: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub rows: Vec<LogRow>,
    /// Set when the run stopped early; names the failing stage.
    pub error: Option<String>,
}

impl SimLog {
    pub fn n_margins(&self) -> usize {
        self.rows.first().map_or(0, |r| r.margins.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub log: SimLog,
    /// Wall time of every filter evaluation in seconds.
    pub filter_seconds: Vec<f64>,
}

/// Runs a scenario. The log is bitwise deterministic for a fixed config and
/// context; only `filter_seconds` varies between runs.
pub fn run_scenario(cfg: &ScenarioConfig, ctx: &FilterContext) -> Result<SimRun, SimError> {
    run_scenario_observed(cfg, ctx, |_, _, _| {})
}

/// Like [`run_scenario`], calling `observe(t, state, u)` before every truth
/// substep.
pub fn run_scenario_observed(
    cfg: &ScenarioConfig,
    ctx: &FilterContext,
    mut observe: impl FnMut(f64, &State, f64),
) -> Result<SimRun, SimError> {
    cfg.validate()?;
    let mut ctx = ctx.clone();
    ctx.epsilon = cfg.epsilon;
    let substeps = cfg.substeps();
    let period = cfg.control_period();
    let mut log = SimLog::default();
    let mut filter_seconds = Vec::with_capacity(cfg.n_ticks());
    let mut s = cfg.initial_state;

    for tick in 0..cfg.n_ticks() {
        let t = tick as f64 * period;
        let y = apply_measurement(&cfg.error_model, &s, tick as u64);
        let u_des = cfg.pd_gains.command(cfg.v_desired.at(t), &y.estimate);
        // the open loop still evaluates the backup-set rows for the log
        let kind = cfg.controller.filter_kind().unwrap_or(FilterKind::BsQp);
        let started = Instant::now();
        let out = match filter_step(kind, &ctx, &y, u_des) {
            Ok(o) => o,
            Err(e) => {
                log.error = Some(format!("filter at t={t}: {e}"));
                break;
            }
        };
        filter_seconds.push(started.elapsed().as_secs_f64());
        let (u_applied, slack, status) = match cfg.controller {
            Controller::None => (ctx.params.clamp_torque(u_des), 0.0, TickStatus::Open),
            _ => (out.u, out.solution.slack, out.solution.status.into()),
        };
        let set = ctx.backup_set.with_center(translate_center(&ctx.backup_set, &ctx.safe, s.position));
        log.rows.push(LogRow {
            t,
            x_true: s,
            x_est: y.estimate,
            u_des,
            u_applied,
            slack,
            status,
            h_true: ctx.safe.value(&s),
            h_est: ctx.safe.value(&y.estimate),
            hb_true: set.value(&s),
            margins: out.margins,
        });
        let mut failed = None;
        for k in 0..substeps {
            observe(t + k as f64 * cfg.truth_dt, &s, u_applied);
            match dynamics::step(&ctx.params, &s, u_applied, cfg.truth_dt, Integrator::Rk4) {
                Ok(next) => s = next,
                Err(e) => {
                    failed = Some(format!("truth integration at t={t}: {e}"));
                    break;
                }
            }
        }
        if let Some(msg) = failed {
            log.error = Some(msg);
            break;
        }
    }
    Ok(SimRun { log, filter_seconds })
}

/// Summary of a run against the safe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub min_h_true: f64,
    pub min_h_est: f64,
    pub first_violation_time: Option<f64>,
    pub max_slack: f64,
    pub relaxed_tick_count: usize,
    pub error_tick_count: usize,
    pub max_position_true: f64,
    pub ticks: usize,
    pub aborted: Option<String>,
}

/// Scans a log. The violation time is interpolated linearly between the last
/// safe tick and the first unsafe one.
pub fn evaluate_safety(log: &SimLog, safe: &SafeSetSpec) -> Result<Report, SimError> {
    let first = log.rows.first().ok_or(SimError::EmptyLog)?;
    let h = |r: &LogRow| safe.value(&r.x_true);
    let mut first_violation_time = None;
    let mut prev: Option<&LogRow> = None;
    for r in &log.rows {
        let hr = h(r);
        if hr < 0.0 {
            first_violation_time = Some(match prev {
                Some(p) => {
                    let hp = h(p);
                    p.t + (r.t - p.t) * hp / (hp - hr)
                }
                None => r.t,
            });
            break;
        }
        prev = Some(r);
    }
    Ok(Report {
        min_h_true: log.rows.iter().map(h).fold(f64::INFINITY, f64::min),
        min_h_est: log.rows.iter().map(|r| safe.value(&r.x_est)).fold(f64::INFINITY, f64::min),
        first_violation_time,
        max_slack: log.rows.iter().map(|r| r.slack).fold(0.0, f64::max),
        relaxed_tick_count: log.rows.iter().filter(|r| r.status == TickStatus::Relaxed).count(),
        error_tick_count: log.rows.iter().filter(|r| r.status == TickStatus::Error).count(),
        max_position_true: log.rows.iter().map(|r| r.x_true.position).fold(first.x_true.position, f64::max),
        ticks: log.rows.len(),
        aborted: log.error.clone(),
    })
}

/// Runs the template once per epsilon. Reports come back in input order.
/// `threads` caps the worker pool when `parallel` is set.
pub fn sweep_epsilon(
    template: &ScenarioConfig,
    ctx: &FilterContext,
    eps_values: &[f64],
    parallel: bool,
    threads: Option<usize>,
) -> Result<Vec<(f64, Report)>, SimError> {
    if eps_values.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(SimError::InvalidScenario("epsilon values must be finite and non-negative".into()));
    }
    if eps_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(SimError::InvalidScenario("epsilon values must be sorted".into()));
    }
    let one = |eps: f64| -> Result<(f64, Report), SimError> {
        let cfg = ScenarioConfig { epsilon: EpsilonProvider::Constant(eps), ..template.clone() };
        let run = run_scenario(&cfg, ctx)?;
        Ok((eps, evaluate_safety(&run.log, &ctx.safe)?))
    };
    if !parallel {
        return eps_values.iter().map(|e| one(*e)).collect();
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| SimError::ThreadPool(e.to_string()))?;
    pool.install(|| eps_values.par_iter().map(|e| one(*e)).collect())
}

/// Thread cap from `SAFEGUARD_THREADS`. Unset means no cap; anything but a
/// positive integer is an error.
pub fn thread_cap_from_env() -> Result<Option<usize>, SimError> {
    match std::env::var("SAFEGUARD_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(SimError::InvalidScenario(format!("SAFEGUARD_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, position: f64) -> LogRow {
        LogRow {
            t,
            x_true: State::new(position, 0.0, 0.0, 0.0),
            x_est: State::new(position, 0.0, 0.0, 0.0),
            u_des: 0.0,
            u_applied: 0.0,
            slack: 0.0,
            status: TickStatus::Optimal,
            h_true: 2.0 - position,
            h_est: 2.0 - position,
            hb_true: 0.0,
            margins: vec![],
        }
    }

    #[test]
    fn violation_time_is_interpolated() {
        let log = SimLog { rows: vec![row(0.0, 1.9), row(0.004, 2.1)], error: None };
        let r = evaluate_safety(&log, &SafeSetSpec::default()).unwrap();
        assert!((r.first_violation_time.unwrap() - 0.002).abs() < 1e-12);
        assert!((r.min_h_true + 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_log() {
        assert_eq!(evaluate_safety(&SimLog::default(), &SafeSetSpec::default()), Err(SimError::EmptyLog));
    }

    #[test]
    fn velocity_profile_steps() {
        let p = VelocityProfile { steps: vec![(1.0, 0.5), (2.0, -0.2)] };
        assert_eq!(p.at(0.5), 0.0);
        assert_eq!(p.at(1.0), 0.5);
        assert_eq!(p.at(3.0), -0.2);
    }

    #[test]
    fn scenario_validation() {
        let mut cfg = ScenarioConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.substeps(), 4);
        assert_eq!(cfg.n_ticks(), 2000);
        cfg.truth_dt = 3e-3;
        assert!(cfg.validate().is_err());
    }
}
