//! Backup trajectories with their sensitivity matrices, and the implicit
//! safe-set constraints built from them.
//!
//! The closed loop `x' = f(x) + g(x) k_B(x)` and its variational equation
//! `S' = J_cl(x) S` are integrated together with explicit Euler. The
//! backup-set center is held fixed along a flow, so the closed loop is
//! autonomous and `S` is the exact derivative of the discrete flow map.

use alloc::vec::Vec;

use nalgebra::{Matrix4, Vector4};

use crate::dynamics::{self, Integrator, SegwayParams, State};
use crate::linear_control::{backup_control, BackupPolicy, QuadraticBackupSet, SafeSetSpec};
use crate::math::{round, wrap_angle};
use crate::{Error, Result};

const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSettings {
    /// Backup horizon `T`.
    pub horizon: f64,
    /// Internal Euler step.
    pub dt_int: f64,
    /// Number of trajectory constraint times, including `0` and `T`.
    pub n_constraints: usize,
}

impl Default for FlowSettings {
    fn default() -> Self {
        Self { horizon: 1.0, dt_int: 0.005, n_constraints: 4 }
    }
}

impl FlowSettings {
    /// Spacing of the constraint grid.
    pub fn constraint_spacing(&self) -> f64 {
        self.horizon / (self.n_constraints - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_constraints < 2 {
            return Err(Error::InvalidArgument("n_constraints must be at least 2"));
        }
        if !(self.dt_int > 0.0 && self.dt_int.is_finite()) {
            return Err(Error::InvalidArgument("dt_int must be positive"));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidArgument("horizon must be non-negative"));
        }
        let steps = self.horizon / self.dt_int;
        if (steps - round(steps)).abs() * self.dt_int > GRID_TOL {
            return Err(Error::InvalidArgument("horizon must be an integer number of dt_int steps"));
        }
        Ok(())
    }
}

/// Backup trajectory samples on the constraint grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrid {
    pub taus: Vec<f64>,
    pub states: Vec<State>,
    /// `d phi_tau / d x` at each grid time.
    pub sensitivities: Vec<Matrix4<f64>>,
    pub anchor: State,
    /// Frozen backup-set center used by the backup controller.
    pub center: State,
    pub dt_int: f64,
    pub horizon: f64,
    /// A recorded grid time sits within 1e-9 of a clamp switch, so the
    /// sensitivity there may be one-sided.
    pub saturation_boundary: bool,
    /// Smallest `| |u_unsat| - limit |` seen at any integration step.
    pub min_clamp_gap: f64,
}

impl FlowGrid {
    pub fn terminal_state(&self) -> &State {
        self.states.last().expect("flow grid is never empty")
    }

    pub fn terminal_sensitivity(&self) -> &Matrix4<f64> {
        self.sensitivities.last().expect("flow grid is never empty")
    }
}

/// Result of one Euler step of the closed loop and its variational equation.
struct StepOut {
    state: State,
    sensitivity: Matrix4<f64>,
    clamp_gap: f64,
    saturated: bool,
}

fn closed_loop_step(
    params: &SegwayParams,
    policy: &BackupPolicy,
    center: &State,
    x: &State,
    s: &Matrix4<f64>,
    dt: f64,
) -> Result<StepOut> {
    let u_raw = policy.unsaturated(x, center);
    let saturated = u_raw.abs() > policy.torque_limit;
    let u = backup_control(policy, x, center);
    let f = dynamics::drift(params, x)?;
    let g = dynamics::actuation(params, x)?;
    let mut jac = dynamics::drift_jacobian(params, x)? + dynamics::actuation_jacobian(params, x)? * u;
    if !saturated {
        jac -= g * policy.gain;
    }
    let next = x.to_vector() + (f + g * u) * dt;
    let mut state = State::from_vector(&next);
    state.pitch = wrap_angle(state.pitch);
    let sensitivity = s + jac * s * dt;
    if !state.is_finite() || !sensitivity.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("backup flow"));
    }
    Ok(StepOut { state, sensitivity, clamp_gap: (u_raw.abs() - policy.torque_limit).abs(), saturated })
}

/// Advances `n` uniform Euler steps of the closed loop and its sensitivity.
pub fn euler_steps(
    params: &SegwayParams,
    policy: &BackupPolicy,
    center: &State,
    x0: &State,
    s0: &Matrix4<f64>,
    n: usize,
    dt: f64,
) -> Result<(State, Matrix4<f64>)> {
    let mut x = *x0;
    let mut s = *s0;
    for _ in 0..n {
        let out = closed_loop_step(params, policy, center, &x, &s, dt)?;
        x = out.state;
        s = out.sensitivity;
    }
    Ok((x, s))
}

/// Integration breakpoints: multiples of `dt_int` merged with the
/// constraint times. Returns the breakpoints and, for each constraint time,
/// its index among them.
fn breakpoints(settings: &FlowSettings) -> (Vec<f64>, Vec<usize>) {
    let n_steps = round(settings.horizon / settings.dt_int) as usize;
    let spacing = settings.constraint_spacing();
    let mut times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * settings.dt_int).collect();
    if let Some(last) = times.last_mut() {
        *last = settings.horizon;
    }
    let mut rows = Vec::with_capacity(settings.n_constraints);
    for j in 0..settings.n_constraints {
        let tau = if j + 1 == settings.n_constraints { settings.horizon } else { j as f64 * spacing };
        let pos = times.partition_point(|t| *t < tau - GRID_TOL);
        if pos < times.len() && (times[pos] - tau).abs() <= GRID_TOL {
            rows.push(pos);
        } else {
            times.insert(pos, tau);
            for r in rows.iter_mut() {
                if *r >= pos {
                    *r += 1;
                }
            }
            rows.push(pos);
        }
    }
    rows.dedup();
    (times, rows)
}

/// Integrates the backup flow from `x0` with the backup set's center held
/// fixed, recording states and sensitivities at the constraint times
/// `tau_j = j T / (n_constraints - 1)`.
pub fn flow_with_sensitivity(
    params: &SegwayParams,
    policy: &BackupPolicy,
    backup_set: &QuadraticBackupSet,
    x0: &State,
    settings: &FlowSettings,
) -> Result<FlowGrid> {
    settings.validate()?;
    if !x0.is_finite() {
        return Err(Error::NonFinite("flow anchor"));
    }
    let center = backup_set.center;
    let (times, rows) = breakpoints(settings);

    let mut grid = FlowGrid {
        taus: Vec::with_capacity(rows.len()),
        states: Vec::with_capacity(rows.len()),
        sensitivities: Vec::with_capacity(rows.len()),
        anchor: *x0,
        center,
        dt_int: settings.dt_int,
        horizon: settings.horizon,
        saturation_boundary: false,
        min_clamp_gap: f64::INFINITY,
    };

    let mut x = *x0;
    let mut s = Matrix4::identity();
    let mut next_row = 0;
    let mut switches = Vec::new();
    let mut prev: Option<(f64, f64, bool)> = None; // (time, signed gap, saturated)
    for (i, &t) in times.iter().enumerate() {
        if next_row < rows.len() && rows[next_row] == i {
            grid.taus.push(t);
            grid.states.push(x);
            grid.sensitivities.push(s);
            next_row += 1;
        }
        if i + 1 == times.len() {
            break;
        }
        let out = closed_loop_step(params, policy, &center, &x, &s, times[i + 1] - t)?;
        grid.min_clamp_gap = grid.min_clamp_gap.min(out.clamp_gap);
        let signed = if out.saturated { out.clamp_gap } else { -out.clamp_gap };
        if let Some((t0, g0, sat0)) = prev {
            if sat0 != out.saturated {
                switches.push(t0 + (t - t0) * g0 / (g0 - signed));
            }
        }
        prev = Some((t, signed, out.saturated));
        x = out.state;
        s = out.sensitivity;
    }
    grid.saturation_boundary = switches
        .iter()
        .any(|ts| grid.taus.iter().any(|tau| (tau - ts).abs() <= GRID_TOL));
    Ok(grid)
}

/// Dense backup trajectory without sensitivities, for checking grid-based
/// conclusions. Returns the states at every step, including `x0`.
pub fn backup_trajectory(
    params: &SegwayParams,
    policy: &BackupPolicy,
    center: &State,
    x0: &State,
    horizon: f64,
    dt: f64,
    method: Integrator,
) -> Result<Vec<State>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive"));
    }
    let n = round(horizon / dt) as usize;
    let mut out = Vec::with_capacity(n + 1);
    let mut x = *x0;
    out.push(x);
    for _ in 0..n {
        let u = backup_control(policy, &x, center);
        x = dynamics::step(params, &x, u, dt, method)?;
        out.push(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowKind {
    Trajectory { index: usize, tau: f64 },
    Terminal,
}

/// One implicit-set constraint evaluated at the anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintRow {
    pub kind: RowKind,
    /// `h(phi_tau(x))` or `h_B(phi_T(x))`.
    pub value: f64,
    /// Row gradient `grad h(phi) S`.
    pub gradient: Vector4<f64>,
    pub lie_f: f64,
    pub lie_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintData {
    pub rows: Vec<ConstraintRow>,
}

impl ConstraintData {
    pub fn trajectory_rows(&self) -> impl Iterator<Item = &ConstraintRow> {
        self.rows.iter().filter(|r| matches!(r.kind, RowKind::Trajectory { .. }))
    }

    pub fn terminal(&self) -> Option<&ConstraintRow> {
        self.rows.iter().find(|r| r.kind == RowKind::Terminal)
    }
}

/// Values, gradients and Lie derivatives of `h(phi_tau(x))` for every grid
/// time and of `h_B(phi_T(x))`, all at the grid's anchor.
pub fn constraint_data(
    grid: &FlowGrid,
    safe: &SafeSetSpec,
    backup_set: &QuadraticBackupSet,
    params: &SegwayParams,
) -> Result<ConstraintData> {
    let f = dynamics::drift(params, &grid.anchor)?;
    let g = dynamics::actuation(params, &grid.anchor)?;
    let grad_h = safe.gradient();
    let set = backup_set.with_center(grid.center);
    let mut rows = Vec::with_capacity(grid.taus.len() + 1);
    for (j, ((tau, phi), sens)) in grid.taus.iter().zip(&grid.states).zip(&grid.sensitivities).enumerate() {
        let gradient = sens.transpose() * grad_h;
        rows.push(ConstraintRow {
            kind: RowKind::Trajectory { index: j, tau: *tau },
            value: safe.value(phi),
            gradient,
            lie_f: gradient.dot(&f),
            lie_g: gradient.dot(&g),
        });
    }
    let gradient = grid.terminal_sensitivity().transpose() * set.gradient(grid.terminal_state());
    rows.push(ConstraintRow {
        kind: RowKind::Terminal,
        value: set.value(grid.terminal_state()),
        gradient,
        lie_f: gradient.dot(&f),
        lie_g: gradient.dot(&g),
    });
    if rows.iter().any(|r| !(r.value.is_finite() && r.lie_f.is_finite() && r.lie_g.is_finite())) {
        return Err(Error::NonFinite("constraint data"));
    }
    Ok(ConstraintData { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub in_c_i: bool,
    /// `value - mu` for trajectory rows, `value` for the terminal row.
    pub margins: Vec<f64>,
}

/// Implicit safe set membership of the anchor: every recorded trajectory
/// value and the terminal value are non-negative.
pub fn membership(cd: &ConstraintData, mu: f64) -> Membership {
    let in_c_i = cd.rows.iter().all(|r| r.value >= 0.0);
    let margins = cd
        .rows
        .iter()
        .map(|r| match r.kind {
            RowKind::Trajectory { .. } => r.value - mu,
            RowKind::Terminal => r.value,
        })
        .collect();
    Membership { in_c_i, margins }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_control::LqrWeights;
    use crate::math::to_dmatrix;

    fn setup() -> (SegwayParams, BackupPolicy, QuadraticBackupSet) {
        let params = SegwayParams::nominal();
        let (policy, p) = BackupPolicy::lqr(&params, &LqrWeights::default()).unwrap();
        let set = QuadraticBackupSet::new(p, 13.0, State::default()).unwrap();
        (params, policy, set)
    }

    #[test]
    fn zero_horizon_gives_single_row() {
        let (params, policy, set) = setup();
        let x0 = State::new(0.1, 0.2, 0.0, 0.0);
        let settings = FlowSettings { horizon: 0.0, ..Default::default() };
        let grid = flow_with_sensitivity(&params, &policy, &set, &x0, &settings).unwrap();
        assert_eq!(grid.taus, alloc::vec![0.0]);
        assert_eq!(grid.states, alloc::vec![x0]);
        assert_eq!(grid.sensitivities, alloc::vec![Matrix4::identity()]);
    }

    #[test]
    fn default_grid_times() {
        let (params, policy, set) = setup();
        let grid = flow_with_sensitivity(&params, &policy, &set, &State::default(), &FlowSettings::default())
            .unwrap();
        assert_eq!(grid.taus.len(), 4);
        assert_eq!(grid.taus[0], 0.0);
        assert!((grid.taus[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((grid.taus[2] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(grid.taus[3], 1.0);
        assert_eq!(grid.states[0], State::default());
        assert!(grid.taus.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn linear_sensitivity_is_matrix_power() {
        // near upright, small states keep the clamp inactive; the variational
        // recursion uses the local Jacobian, which at the equilibrium
        // trajectory equals A - BK exactly
        let (params, policy, set) = setup();
        let settings = FlowSettings { horizon: 0.5, dt_int: 0.005, n_constraints: 2 };
        let grid = flow_with_sensitivity(&params, &policy, &set, &State::default(), &settings).unwrap();
        let a_cl = policy.closed_loop_matrix(&params).unwrap();
        let step = Matrix4::identity() + a_cl * 0.005;
        let mut expected = Matrix4::identity();
        for _ in 0..100 {
            expected = step * expected;
        }
        assert!((grid.terminal_sensitivity() - expected).amax() < 1e-12);
        let _ = to_dmatrix(&expected);
    }

    #[test]
    fn rejects_misaligned_horizon() {
        let (params, policy, set) = setup();
        let settings = FlowSettings { horizon: 1.0, dt_int: 0.003, n_constraints: 4 };
        assert!(flow_with_sensitivity(&params, &policy, &set, &State::default(), &settings).is_err());
        let settings = FlowSettings { n_constraints: 1, ..Default::default() };
        assert!(flow_with_sensitivity(&params, &policy, &set, &State::default(), &settings).is_err());
    }

    #[test]
    fn semigroup_of_discrete_flow() {
        let (params, policy, set) = setup();
        let x0 = State::new(0.2, 0.6, 0.05, -0.1);
        let c = set.center;
        let (xa, sa) = euler_steps(&params, &policy, &c, &x0, &Matrix4::identity(), 30, 0.005).unwrap();
        let (xb, sb) = euler_steps(&params, &policy, &c, &xa, &sa, 45, 0.005).unwrap();
        let (xc, sc) = euler_steps(&params, &policy, &c, &x0, &Matrix4::identity(), 75, 0.005).unwrap();
        assert_eq!(xb, xc);
        assert!((sb - sc).amax() <= 1e-12);
    }

    #[test]
    fn first_row_is_plain_cbf() {
        let (params, policy, set) = setup();
        let x0 = State::new(0.5, 0.8, 0.1, 0.2);
        let safe = SafeSetSpec::default();
        let grid = flow_with_sensitivity(&params, &policy, &set, &x0, &FlowSettings::default()).unwrap();
        let cd = constraint_data(&grid, &safe, &set, &params).unwrap();
        let row = cd.rows[0];
        let f = dynamics::drift(&params, &x0).unwrap();
        let g = dynamics::actuation(&params, &x0).unwrap();
        assert_eq!(row.value, safe.value(&x0));
        assert_eq!(row.lie_f, safe.gradient().dot(&f));
        assert_eq!(row.lie_g, safe.gradient().dot(&g));
        assert_eq!(row.lie_f, -x0.velocity);
        // h is affine: row gradient is minus the first row of S
        for (r, sens) in cd.trajectory_rows().zip(&grid.sensitivities) {
            assert_eq!(r.gradient, -sens.row(0).transpose());
        }
        assert_eq!(cd.rows.len(), 5);
    }

    #[test]
    fn membership_examples() {
        let (params, policy, set) = setup();
        let safe = SafeSetSpec::default();
        let at_rest = State::upright_at(-0.2);
        let set_here = set.with_center(crate::linear_control::translate_center(&set, &safe, at_rest.position));
        let grid = flow_with_sensitivity(&params, &policy, &set_here, &at_rest, &FlowSettings::default()).unwrap();
        let cd = constraint_data(&grid, &safe, &set_here, &params).unwrap();
        assert!(membership(&cd, 0.1).in_c_i);

        let outside = State::upright_at(3.0);
        let set_there = set.with_center(crate::linear_control::translate_center(&set, &safe, 3.0));
        let grid = flow_with_sensitivity(&params, &policy, &set_there, &outside, &FlowSettings::default()).unwrap();
        let cd = constraint_data(&grid, &safe, &set_there, &params).unwrap();
        let m = membership(&cd, 0.1);
        assert!(!m.in_c_i);
        assert!((m.margins[0] - (-1.0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn dense_trajectory_starts_at_anchor() {
        let (params, policy, set) = setup();
        let x0 = State::new(0.0, 0.5, 0.0, 0.0);
        let traj = backup_trajectory(&params, &policy, &set.center, &x0, 0.1, 1e-3, Integrator::Rk4).unwrap();
        assert_eq!(traj.len(), 101);
        assert_eq!(traj[0], x0);
    }
}
