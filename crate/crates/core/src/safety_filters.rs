//! The three safety filters as small conic programs over the torque.
//!
//! Every row has the form `constant + linear . u - cone_coeff ||u|| >= 0`.
//! The objective is `1/2 ||u - u_d||^2` with box limits `|u_k| <= limit`.
//! Scalar programs are solved exactly; larger ones go through a log-barrier
//! interior-point method. Infeasible programs are relaxed with one uniform
//! slack added to every row, and the slack is always reported.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::backup_flow::{constraint_data, flow_with_sensitivity, membership, ConstraintData, RowKind};
use crate::context::FilterContext;
use crate::linear_control::{translate_center, QuadraticBackupSet};
use crate::math::sqrt;
use crate::robustness::{mr_parameters, Measurement};
use crate::dynamics::State;
use crate::{Error, Result};

/// Rows within this distance of zero at the solution are reported active.
const ACTIVE_TOL: f64 = 1e-9;
const MAX_NEWTON: usize = 200;
const NEWTON_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowLabel {
    /// Plain barrier row on `h`.
    Barrier,
    Trajectory(usize),
    Terminal,
    /// Rows of hand-built programs.
    Custom(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeRow {
    pub constant: f64,
    pub linear: Vec<f64>,
    pub cone_coeff: f64,
    pub label: RowLabel,
}

impl ConeRow {
    pub fn linear(constant: f64, linear: Vec<f64>, label: RowLabel) -> Self {
        Self { constant, linear, cone_coeff: 0.0, label }
    }

    /// `constant + linear . u - cone_coeff ||u||`.
    pub fn residual(&self, u: &[f64]) -> f64 {
        let dot: f64 = self.linear.iter().zip(u).map(|(a, b)| a * b).sum();
        let norm = sqrt(u.iter().map(|v| v * v).sum());
        self.constant + dot - self.cone_coeff * norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub u_desired: Vec<f64>,
    pub rows: Vec<ConeRow>,
    /// Symmetric box `|u_k| <= torque_limit`.
    pub torque_limit: f64,
    pub slack_weight: f64,
}

impl ConicProgram {
    pub fn dim(&self) -> usize {
        self.u_desired.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        if m == 0 {
            return Err(Error::InvalidArgument("program needs at least one input"));
        }
        if !(self.torque_limit > 0.0 && self.torque_limit.is_finite()) {
            return Err(Error::InvalidArgument("torque limit must be positive"));
        }
        if !(self.slack_weight > 0.0) {
            return Err(Error::InvalidArgument("slack weight must be positive"));
        }
        for r in &self.rows {
            if r.linear.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: r.linear.len() });
            }
            if !(r.cone_coeff >= 0.0) {
                return Err(Error::InvalidArgument("cone coefficient must be non-negative"));
            }
            if !(r.constant.is_finite() && r.cone_coeff.is_finite() && r.linear.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite("program row"));
            }
        }
        if !self.u_desired.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("desired input"));
        }
        Ok(())
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        0.5 * u.iter().zip(&self.u_desired).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    /// Worst row residual at `u`, or `+inf` without rows.
    pub fn min_residual(&self, u: &[f64]) -> f64 {
        self.rows.iter().map(|r| r.residual(u)).fold(f64::INFINITY, f64::min)
    }

    fn active_rows(&self, u: &[f64], slack: f64) -> Vec<RowLabel> {
        self.rows
            .iter()
            .filter(|r| (r.residual(u) + slack).abs() <= ACTIVE_TOL * (1.0 + r.constant.abs()))
            .map(|r| r.label)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Relaxed,
    Error,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Relaxed => "relaxed",
            SolveStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSolution {
    pub u: Vec<f64>,
    pub slack: f64,
    pub status: SolveStatus,
    pub active_rows: Vec<RowLabel>,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    CbfQp,
    BsQp,
    MrBsOp,
}

impl FilterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterKind::CbfQp => "cbf_qp",
            FilterKind::BsQp => "bs_qp",
            FilterKind::MrBsOp => "mr_bs_op",
        }
    }
}

/// Builds the filter program for one input from anchor-evaluated constraint
/// data. `row_params` holds `(a_r, b_r)` per row of `cd` and is only read
/// for [`FilterKind::MrBsOp`].
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    kind: FilterKind,
    cd: &ConstraintData,
    mu: f64,
    row_params: &[(f64, f64)],
    gamma: f64,
    u_desired: f64,
    torque_limit: f64,
    slack_weight: f64,
) -> Result<ConicProgram> {
    if !(mu >= 0.0 && gamma >= 0.0) {
        return Err(Error::InvalidArgument("mu and gamma must be non-negative"));
    }
    let mut rows = Vec::with_capacity(cd.rows.len());
    match kind {
        FilterKind::CbfQp => {
            if mu > 0.0 {
                return Err(Error::BadCombination);
            }
            let r = cd
                .rows
                .iter()
                .find(|r| matches!(r.kind, RowKind::Trajectory { index: 0, .. }))
                .ok_or(Error::InvalidArgument("constraint data has no initial row"))?;
            rows.push(ConeRow::linear(r.lie_f + gamma * r.value, vec![r.lie_g], RowLabel::Barrier));
        }
        FilterKind::BsQp | FilterKind::MrBsOp => {
            if kind == FilterKind::MrBsOp && row_params.len() != cd.rows.len() {
                return Err(Error::DimensionMismatch { expected: cd.rows.len(), found: row_params.len() });
            }
            for (i, r) in cd.rows.iter().enumerate() {
                let (nu, label) = match r.kind {
                    RowKind::Trajectory { index, .. } => (mu, RowLabel::Trajectory(index)),
                    RowKind::Terminal => (0.0, RowLabel::Terminal),
                };
                let (a, b) = if kind == FilterKind::MrBsOp { row_params[i] } else { (0.0, 0.0) };
                rows.push(ConeRow {
                    constant: r.lie_f + gamma * (r.value - nu) - a,
                    linear: vec![r.lie_g],
                    cone_coeff: b,
                    label,
                });
            }
        }
    }
    Ok(ConicProgram { u_desired: vec![u_desired], rows, torque_limit, slack_weight })
}

/// Splits a scalar cone row into `c + d u >= 0` for both slopes.
pub fn split_row(r: &ConeRow) -> [(f64, f64); 2] {
    let l = r.linear[0];
    [(r.constant, l - r.cone_coeff), (r.constant, l + r.cone_coeff)]
}

/// Feasible interval of the scalar rows relaxed by `delta`, intersected with
/// the box.
fn interval_1d(halves: &[(f64, f64)], lim: f64, delta: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (-lim, lim);
    for &(c, d) in halves {
        if d > 0.0 {
            lo = lo.max(-(c + delta) / d);
        } else if d < 0.0 {
            hi = hi.min((c + delta) / -d);
        } else if c + delta < 0.0 {
            return (f64::INFINITY, f64::NEG_INFINITY);
        }
    }
    (lo, hi)
}

/// Smallest uniform slack that makes the scalar interval nonempty.
fn minimal_slack_1d(halves: &[(f64, f64)], lim: f64) -> f64 {
    let mut delta = 0.0f64;
    for &(ci, di) in halves {
        if di > 0.0 {
            delta = delta.max(-ci - di * lim);
            for &(cj, dj) in halves.iter().filter(|(_, d)| *d < 0.0) {
                delta = delta.max(-(ci * -dj + cj * di) / (di - dj));
            }
        } else if di < 0.0 {
            delta = delta.max(-ci + di * lim);
        } else {
            delta = delta.max(-ci);
        }
    }
    delta
}

/// Exact solution of a scalar program.
pub fn solve_1d(p: &ConicProgram) -> Result<FilterSolution> {
    p.validate()?;
    if p.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, found: p.dim() });
    }
    let lim = p.torque_limit;
    let ud = p.u_desired[0];
    let halves: Vec<(f64, f64)> = p.rows.iter().flat_map(split_row).collect();
    let (lo, hi) = interval_1d(&halves, lim, 0.0);
    let (slack, lo, hi, status) = if lo <= hi {
        (0.0, lo, hi, SolveStatus::Optimal)
    } else {
        let delta = minimal_slack_1d(&halves, lim);
        let (lo, hi) = interval_1d(&halves, lim, delta);
        (delta, lo, hi, SolveStatus::Relaxed)
    };
    let u = if lo <= hi { ud.clamp(lo, hi) } else { 0.5 * (lo + hi) };
    let violation = (-(p.min_residual(&[u]) + slack)).max(0.0);
    let projection_gap = if lo <= hi { 0.0 } else { lo - hi };
    Ok(FilterSolution {
        active_rows: p.active_rows(&[u], slack),
        u: vec![u],
        slack,
        status,
        kkt_residual: violation + projection_gap,
    })
}

/// Barrier problem over `z = (u, t, delta)`: `t >= ||u||` is the epigraph of
/// the norm shared by all cone rows and `delta` is the uniform slack.
struct Barrier<'a> {
    p: &'a ConicProgram,
    m: usize,
    t_max: f64,
    mode: Mode,
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    /// Minimize a free `delta` to find a strictly feasible point.
    PhaseOne,
    /// Rows hold without slack; `delta` is unused.
    Feasible,
    /// `delta >= 0` with penalty `w (delta + delta^2 / 2)`.
    Relaxed,
}

impl Barrier<'_> {
    fn n(&self) -> usize {
        self.m + 2
    }

    fn n_constraints(&self) -> usize {
        let extra = match self.mode {
            Mode::Relaxed => 1,
            _ => 0,
        };
        self.p.rows.len() + 2 * self.m + 2 + extra
    }

    fn slack_of(&self, z: &DVector<f64>) -> f64 {
        match self.mode {
            Mode::Feasible => 0.0,
            _ => z[self.m + 1],
        }
    }

    /// Linear constraints `a . z + b > 0`.
    fn linear_constraints(&self) -> Vec<(DVector<f64>, f64)> {
        let (m, n) = (self.m, self.n());
        let mut out = Vec::new();
        for r in &self.p.rows {
            let mut a = DVector::zeros(n);
            for k in 0..m {
                a[k] = r.linear[k];
            }
            a[m] = -r.cone_coeff;
            if self.mode != Mode::Feasible {
                a[m + 1] = 1.0;
            }
            out.push((a, r.constant));
        }
        for k in 0..m {
            let mut a = DVector::zeros(n);
            a[k] = -1.0;
            out.push((a.clone(), self.p.torque_limit));
            a[k] = 1.0;
            out.push((a, self.p.torque_limit));
        }
        let mut a = DVector::zeros(n);
        a[m] = -1.0;
        out.push((a, self.t_max));
        if self.mode == Mode::Relaxed {
            let mut a = DVector::zeros(n);
            a[m + 1] = 1.0;
            out.push((a, 0.0));
        }
        out
    }

    fn objective(&self, z: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let (m, n) = (self.m, self.n());
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        let val = match self.mode {
            Mode::PhaseOne => {
                g[m + 1] = 1.0;
                z[m + 1]
            }
            Mode::Feasible | Mode::Relaxed => {
                let mut v = 0.0;
                for k in 0..m {
                    let d = z[k] - self.p.u_desired[k];
                    v += 0.5 * d * d;
                    g[k] = d;
                    h[(k, k)] = 1.0;
                }
                if self.mode == Mode::Feasible {
                    // pins the unused slack coordinate at zero
                    let d = z[m + 1];
                    v += 0.5 * d * d;
                    g[m + 1] = d;
                    h[(m + 1, m + 1)] = 1.0;
                }
                if self.mode == Mode::Relaxed {
                    let w = self.p.slack_weight;
                    let d = z[m + 1];
                    v += w * (d + 0.5 * d * d);
                    g[m + 1] = w * (1.0 + d);
                    h[(m + 1, m + 1)] = w;
                }
                v
            }
        };
        (val, g, h)
    }

    /// Barrier value, gradient and Hessian, or `None` outside the interior.
    fn barrier(&self, z: &DVector<f64>, lin: &[(DVector<f64>, f64)]) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let (m, n) = (self.m, self.n());
        let mut val = 0.0;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (a, b) in lin {
            let r = a.dot(z) + b;
            if !(r > 0.0) {
                return None;
            }
            val -= libm::log(r);
            g -= a / r;
            h += a * a.transpose() / (r * r);
        }
        let t = z[m];
        let q = t * t - (0..m).map(|k| z[k] * z[k]).sum::<f64>();
        if !(q > 0.0 && t > 0.0) {
            return None;
        }
        val -= libm::log(q);
        let mut dq = DVector::zeros(n);
        for k in 0..m {
            dq[k] = -2.0 * z[k];
        }
        dq[m] = 2.0 * t;
        g -= &dq / q;
        h += &dq * dq.transpose() / (q * q);
        for k in 0..m {
            h[(k, k)] += 2.0 / q;
        }
        h[(m, m)] -= 2.0 / q;
        Some((val, g, h))
    }

    /// Runs the barrier method from a strictly feasible `z`. Returns the final
    /// iterate, the duality-gap bound, and whether the Newton budget held.
    fn solve(&self, mut z: DVector<f64>, tol: f64, stop_below_zero: bool) -> (DVector<f64>, f64, bool) {
        let lin = self.linear_constraints();
        let mc = self.n_constraints() as f64;
        let mut s = 1.0;
        loop {
            let mut steps = 0;
            let mut decrement = f64::INFINITY;
            while steps < MAX_NEWTON {
                steps += 1;
                let (f0, g0, h0) = self.objective(&z);
                let Some((b0, gb, hb)) = self.barrier(&z, &lin) else {
                    return (z, f64::INFINITY, false);
                };
                let g = g0 * s + gb;
                let h = h0 * s + hb;
                let dz = match h.clone().cholesky() {
                    Some(ch) => ch.solve(&(-&g)),
                    None => match h.lu().solve(&(-&g)) {
                        Some(d) => d,
                        None => return (z, f64::INFINITY, false),
                    },
                };
                let lambda_sq = -g.dot(&dz);
                decrement = 0.5 * lambda_sq;
                if decrement <= NEWTON_TOL || decrement / s <= 1e-3 * tol {
                    break;
                }
                let phi0 = s * f0 + b0;
                let mut alpha = 1.0;
                let mut moved = false;
                for _ in 0..60 {
                    let trial = &z + &dz * alpha;
                    if let Some((bt, _, _)) = self.barrier(&trial, &lin) {
                        let phi = s * self.objective(&trial).0 + bt;
                        if phi <= phi0 - 0.25 * alpha * lambda_sq {
                            z = trial;
                            moved = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    // no descent left at working precision
                    decrement = 0.0;
                    break;
                }
                if stop_below_zero && z[self.m + 1] < 0.0 {
                    return (z, 0.0, true);
                }
            }
            if steps >= MAX_NEWTON && decrement > NEWTON_TOL && decrement / s > 1e-3 * tol {
                return (z, mc / s, false);
            }
            let gap = mc / s;
            if gap + decrement / s <= tol {
                return (z, gap + decrement / s, true);
            }
            s *= 20.0;
        }
    }
}

/// Interior-point solution of a program with `m >= 2` inputs (also accepts
/// `m = 1`). `tol` bounds the reported duality gap.
pub fn solve_general(p: &ConicProgram, tol: f64) -> Result<FilterSolution> {
    p.validate()?;
    if !(1e-10..=1e-6).contains(&tol) {
        return Err(Error::InvalidArgument("tolerance must lie in [1e-10, 1e-6]"));
    }
    let m = p.dim();
    let lim = p.torque_limit;
    let t_max = sqrt(m as f64) * lim + 1.0;
    let mut z = DVector::zeros(m + 2);
    z[m] = 1.0;

    let phase_one = Barrier { p, m, t_max, mode: Mode::PhaseOne };
    let start_viol = p.rows.iter().map(|r| -(r.constant - r.cone_coeff)).fold(0.0f64, f64::max);
    z[m + 1] = start_viol + 1.0;
    let (mut zf, feasible) = if p.rows.is_empty() {
        (z, true)
    } else {
        let (zf, _, _) = phase_one.solve(z, 1e-10, true);
        let feasible = zf[m + 1] < 0.0;
        (zf, feasible)
    };

    let (mode, start) = if feasible {
        zf[m + 1] = 0.0;
        (Mode::Feasible, zf)
    } else {
        zf[m + 1] = zf[m + 1].max(0.0) + 1.0;
        (Mode::Relaxed, zf)
    };
    let barrier = Barrier { p, m, t_max, mode };
    let (z, residual, ok) = barrier.solve(start, tol, false);
    let u: Vec<f64> = (0..m).map(|k| z[k]).collect();
    let slack = barrier.slack_of(&z).max(0.0);
    let status = match (ok, mode) {
        (false, _) => SolveStatus::Error,
        (true, Mode::Relaxed) => SolveStatus::Relaxed,
        _ => SolveStatus::Optimal,
    };
    Ok(FilterSolution { active_rows: p.active_rows(&u, slack), u, slack, status, kkt_residual: residual })
}

/// Solves with the exact scalar path when `m = 1`.
pub fn solve(p: &ConicProgram, tol: f64) -> Result<FilterSolution> {
    if p.dim() == 1 {
        solve_1d(p)
    } else {
        solve_general(p, tol)
    }
}

/// Everything one control tick produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub u: f64,
    pub solution: FilterSolution,
    pub program: ConicProgram,
    /// Constraint data at the estimate.
    pub constraints: ConstraintData,
    /// `value - mu` for trajectory rows and `value` for the terminal row.
    pub margins: Vec<f64>,
    pub in_implicit_set: bool,
    pub epsilon: f64,
    pub center: State,
    pub saturation_boundary: bool,
}

/// One filter evaluation at the estimate carried by `y`.
pub fn filter_step(kind: FilterKind, ctx: &FilterContext, y: &Measurement, u_desired: f64) -> Result<FilterOutput> {
    let x_hat = y.estimate;
    let center = translate_center(&ctx.backup_set, &ctx.safe, x_hat.position);
    let set: QuadraticBackupSet = ctx.backup_set.with_center(center);
    let grid = flow_with_sensitivity(&ctx.params, &ctx.policy, &set, &x_hat, &ctx.flow)?;
    let cd = constraint_data(&grid, &ctx.safe, &set, &ctx.params)?;
    let epsilon = match kind {
        FilterKind::MrBsOp => ctx.epsilon.epsilon_of(y),
        _ => 0.0,
    };
    let row_params = mr_parameters(&ctx.bundle, epsilon);
    let mu = match kind {
        FilterKind::CbfQp => 0.0,
        _ => ctx.mu,
    };
    let program = assemble(kind, &cd, mu, &row_params, ctx.gamma, u_desired, ctx.params.torque_limit, ctx.slack_weight)?;
    let solution = solve(&program, ctx.solver_tol)?;
    let mem = membership(&cd, ctx.mu);
    Ok(FilterOutput {
        u: solution.u[0],
        solution,
        program,
        constraints: cd,
        margins: mem.margins,
        in_implicit_set: mem.in_c_i,
        epsilon,
        center,
        saturation_boundary: grid.saturation_boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn program(ud: f64, rows: Vec<(f64, f64, f64)>) -> ConicProgram {
        ConicProgram {
            u_desired: vec![ud],
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (c, l, b))| ConeRow { constant: c, linear: vec![l], cone_coeff: b, label: RowLabel::Custom(i) })
                .collect(),
            torque_limit: 20.0,
            slack_weight: 1e4,
        }
    }

    #[test]
    fn scalar_examples() {
        let s = solve_1d(&program(3.0, vec![])).unwrap();
        assert_eq!((s.u[0], s.slack, s.status), (3.0, 0.0, SolveStatus::Optimal));

        let s = solve_1d(&program(0.0, vec![(-0.3, 1.0, 0.0)])).unwrap();
        assert!((s.u[0] - 0.3).abs() < 1e-15);
        assert!(s.kkt_residual <= 1e-12);
        assert_eq!(s.active_rows, vec![RowLabel::Custom(0)]);

        let s = solve_1d(&program(0.0, vec![(-5.0, 1.0, 0.0), (-5.0, -1.0, 0.0)])).unwrap();
        assert_eq!(s.status, SolveStatus::Relaxed);
        assert!((s.slack - 5.0).abs() < 1e-12);
        assert!(s.u[0].abs() < 1e-12);
    }

    #[test]
    fn relaxation_matches_bisection() {
        let p = program(1.0, vec![(-3.0, 0.5, 0.2), (-1.0, -1.0, 0.0), (2.0, 0.0, 0.4)]);
        let s = solve_1d(&p).unwrap();
        let halves: Vec<(f64, f64)> = p.rows.iter().flat_map(split_row).collect();
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (a, b) = interval_1d(&halves, 20.0, mid);
            if a <= b {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((s.slack - hi).abs() < 1e-9, "{} vs {hi}", s.slack);
        assert!(p.min_residual(&s.u) + s.slack >= -1e-9);
    }

    #[test]
    fn box_limits_the_relaxation() {
        // u >= 25 is out of the box: the slack is the distance beyond 20
        let s = solve_1d(&program(0.0, vec![(-25.0, 1.0, 0.0)])).unwrap();
        assert_eq!(s.status, SolveStatus::Relaxed);
        assert!((s.slack - 5.0).abs() < 1e-12);
        assert_eq!(s.u[0], 20.0);
    }

    #[test]
    fn cone_row_bounds_magnitude() {
        // 1 - 0.5 |u| >= 0
        let s = solve_1d(&program(5.0, vec![(1.0, 0.0, 0.5)])).unwrap();
        assert!((s.u[0] - 2.0).abs() < 1e-15);
        let s = solve_1d(&program(-5.0, vec![(1.0, 0.0, 0.5)])).unwrap();
        assert!((s.u[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_dimension() {
        let mut p = program(0.0, vec![]);
        p.u_desired = vec![0.0, 0.0];
        assert_eq!(solve_1d(&p).unwrap_err(), Error::DimensionMismatch { expected: 1, found: 2 });
    }

    #[test]
    fn general_examples() {
        let p = ConicProgram { u_desired: vec![1.0, 2.0], rows: vec![], torque_limit: 20.0, slack_weight: 1e4 };
        let s = solve_general(&p, 1e-9).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.u[0] - 1.0).abs() < 1e-4 && (s.u[1] - 2.0).abs() < 1e-4, "{:?}", s.u);

        let p = ConicProgram {
            u_desired: vec![0.0, 0.0],
            rows: vec![ConeRow::linear(-1.0, vec![1.0, 0.0], RowLabel::Custom(0))],
            torque_limit: 20.0,
            slack_weight: 1e4,
        };
        let s = solve_general(&p, 1e-9).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.u[0] - 1.0).abs() < 1e-4 && s.u[1].abs() < 1e-4, "{:?}", s.u);
        assert!(s.kkt_residual <= 1e-9);
    }

    #[test]
    fn general_relaxes_infeasible_programs() {
        let p = ConicProgram {
            u_desired: vec![0.0, 0.0],
            rows: vec![
                ConeRow::linear(-5.0, vec![1.0, 0.0], RowLabel::Custom(0)),
                ConeRow::linear(-5.0, vec![-1.0, 0.0], RowLabel::Custom(1)),
            ],
            torque_limit: 20.0,
            slack_weight: 1e4,
        };
        let s = solve_general(&p, 1e-8).unwrap();
        assert_eq!(s.status, SolveStatus::Relaxed);
        assert!((s.slack - 5.0).abs() < 1e-3, "{}", s.slack);
    }

    #[test]
    fn general_agrees_with_scalar_on_cone_rows() {
        let p1 = program(8.0, vec![(3.0, -0.2, 0.3), (1.0, 0.5, 0.1)]);
        let s1 = solve_1d(&p1).unwrap();
        let mut p2 = p1.clone();
        p2.u_desired.push(0.0);
        for r in &mut p2.rows {
            r.linear.push(0.0);
        }
        let s2 = solve_general(&p2, 1e-10).unwrap();
        assert!((p1.objective(&s1.u) - p2.objective(&s2.u)).abs() < 1e-6);
    }
}
