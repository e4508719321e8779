//! Backup controller synthesis: saturated LQR about the upright equilibrium
//! and a quadratic Lyapunov sublevel set that serves as the backup set.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix4, RowVector4, SMatrix, SVector, Vector4};

use crate::dynamics::{self, Integrator, SegwayParams, State};
use crate::math::{frobenius, spectral_abscissa, sqrt, symmetrize, to_dmatrix};
use crate::sampling::Halton;
use crate::{Error, Result};

const HURWITZ_MARGIN: f64 = 1e-9;
const CARE_TOL: f64 = 1e-10;
const CARE_MAX_ITER: usize = 200;
const CARE_REFINE_ITER: usize = 8;
const MIN_LEVEL: f64 = 1e-6;

/// Diagonal LQR weights on `(position, velocity, pitch, pitch_rate)` and the
/// scalar input weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqrWeights {
    pub state: [f64; 4],
    pub input: f64,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self { state: [1.0, 1.0, 100.0, 10.0], input: 1.0 }
    }
}

/// Solves `A_cl^T P + P A_cl = -Q_L` for a Hurwitz `A_cl`.
pub fn solve_lyapunov(a_cl: &DMatrix<f64>, q_l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a_cl.nrows();
    if a_cl.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: a_cl.ncols() });
    }
    if q_l.nrows() != n || q_l.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: q_l.nrows() });
    }
    let abscissa = spectral_abscissa(a_cl);
    if !(abscissa < -HURWITZ_MARGIN) {
        return Err(Error::NotHurwitz { abscissa });
    }
    // vec(A^T P + P A) = (I kron A^T + A^T kron I) vec(P), column-major vec
    let at = a_cl.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q_l.iter().map(|v| -v));
    let lu = op.clone().lu();
    let mut x = lu.solve(&rhs).ok_or(Error::NotHurwitz { abscissa })?;
    // one step of iterative refinement
    let r = &rhs - &op * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let p = symmetrize(&DMatrix::from_column_slice(n, n, x.as_slice()));
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("lyapunov solution"));
    }
    Ok(p)
}

pub fn lyapunov_residual(a_cl: &DMatrix<f64>, q_l: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    frobenius(&(a_cl.transpose() * p + p * a_cl + q_l))
}

/// `K = R^{-1} B^T P`.
pub fn lqr_gain(p: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r_inv = r.clone().try_inverse().ok_or(Error::InvalidArgument("R must be invertible"))?;
    Ok(r_inv * b.transpose() * p)
}

pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let r_inv = r.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(r.nrows(), r.ncols(), f64::NAN));
    frobenius(&(a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q))
}

/// Initial stabilizing gain by Bass's method: with `beta` beyond every
/// eigenvalue's real part, `K = B^T Z^{-1}` where
/// `(A + beta I) Z + Z (A + beta I)^T = 2 B B^T` places the closed loop on
/// `Re(s) = -beta`.
fn bass_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let radius = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re.abs())
        .fold(0.0, f64::max);
    let beta = radius + 1.0;
    let shifted = -(a + DMatrix::identity(n, n) * beta);
    let z = solve_lyapunov(&shifted.transpose(), &(b * b.transpose() * 2.0))?;
    let z_inv = z.try_inverse().ok_or(Error::NotStabilizable)?;
    Ok(b.transpose() * z_inv)
}

/// Stabilizing solution of `A^T P + P A - P B R^{-1} B^T P + Q = 0` by
/// Newton-Kleinman iteration.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, found: b.nrows() });
    }
    if q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::DimensionMismatch { expected: n, found: q.nrows() });
    }
    let r_inv = r.clone().try_inverse().ok_or(Error::InvalidArgument("R must be invertible"))?;

    let mut k = if spectral_abscissa(a) < -HURWITZ_MARGIN {
        DMatrix::zeros(m, n)
    } else {
        bass_gain(a, b).map_err(|_| Error::NotStabilizable)?
    };
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for _ in 0..CARE_MAX_ITER {
        let a_k = a - b * &k;
        let q_k = q + k.transpose() * r * &k;
        let p = solve_lyapunov(&a_k, &q_k).map_err(|_| Error::NotStabilizable)?;
        let res = care_residual(a, b, q, r, &p);
        let scale = 1.0 + frobenius(&p);
        let improved = best.as_ref().map_or(true, |(r0, _)| res < *r0);
        if improved {
            best = Some((res, p.clone()));
        }
        if res <= CARE_TOL * scale {
            break;
        }
        k = &r_inv * b.transpose() * &p;
    }
    let (mut res, mut p) = best.ok_or(Error::NotStabilizable)?;
    // defect correction: A_cl^T X + X A_cl = -Res(P) is the Newton step
    // computed from the residual, which recovers digits lost in P itself
    let g = b * &r_inv * b.transpose();
    for _ in 0..CARE_REFINE_ITER {
        let residual = a.transpose() * &p + &p * a - &p * &g * &p + q;
        let a_cl = a - &g * &p;
        let Ok(x) = solve_lyapunov(&a_cl, &residual) else { break };
        let next = symmetrize(&(&p + x));
        let next_res = care_residual(a, b, q, r, &next);
        if !(next_res < res) {
            break;
        }
        p = next;
        res = next_res;
    }
    if !(res <= 1e-8 * (1.0 + frobenius(&p))) {
        return Err(Error::NotStabilizable);
    }
    let a_cl = a - b * &r_inv * b.transpose() * &p;
    if !(spectral_abscissa(&a_cl) < -HURWITZ_MARGIN) {
        return Err(Error::NotStabilizable);
    }
    Ok(p)
}

/// Saturated linear state feedback `u = clamp(-K (x - center))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackupPolicy {
    pub gain: RowVector4<f64>,
    pub torque_limit: f64,
    /// Equilibrium the policy regulates to; its position is overridden by
    /// the translated backup-set center.
    pub template: State,
}

impl BackupPolicy {
    /// LQR about the upright equilibrium. Returns the policy and the Riccati
    /// solution.
    pub fn lqr(params: &SegwayParams, weights: &LqrWeights) -> Result<(Self, Matrix4<f64>)> {
        params.validate()?;
        let template = State::default();
        let (a, b) = dynamics::linearize(params, &template)?;
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&weights.state));
        let r = DMatrix::from_element(1, 1, weights.input);
        let bd = to_dmatrix(&b);
        let p = solve_care(&to_dmatrix(&a), &bd, &q, &r)?;
        let k = lqr_gain(&p, &bd, &r)?;
        let policy = Self {
            gain: RowVector4::from_fn(|_, j| k[(0, j)]),
            torque_limit: params.torque_limit,
            template,
        };
        Ok((policy, Matrix4::from_fn(|i, j| p[(i, j)])))
    }

    pub fn unsaturated(&self, s: &State, center: &State) -> f64 {
        -(self.gain * (s.to_vector() - center.to_vector()))[0]
    }

    pub fn is_saturated(&self, s: &State, center: &State) -> bool {
        self.unsaturated(s, center).abs() > self.torque_limit
    }

    /// Closed-loop matrix `A - B K` of the linearization at the template.
    pub fn closed_loop_matrix(&self, params: &SegwayParams) -> Result<Matrix4<f64>> {
        let (a, b) = dynamics::linearize(params, &self.template)?;
        Ok(a - b * self.gain)
    }

    /// Center of the policy at a given position.
    pub fn center_at(&self, position: f64) -> State {
        self.template.with_position(position)
    }
}

/// `clamp(-K (s - center), +-limit)`.
pub fn backup_control(policy: &BackupPolicy, s: &State, center: &State) -> f64 {
    policy.unsaturated(s, center).clamp(-policy.torque_limit, policy.torque_limit)
}

/// Half-space safe set `{position <= x_max}` with `h(x) = x_max - position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeSetSpec {
    pub x_max: f64,
}

impl Default for SafeSetSpec {
    fn default() -> Self {
        Self { x_max: 2.0 }
    }
}

impl SafeSetSpec {
    pub fn value(&self, s: &State) -> f64 {
        self.x_max - s.position
    }

    pub fn gradient(&self) -> Vector4<f64> {
        Vector4::new(-1.0, 0.0, 0.0, 0.0)
    }

    /// Lipschitz constant of `h`, the norm of its constant gradient.
    pub fn lipschitz(&self) -> f64 {
        1.0
    }
}

/// Ellipsoid `h_B(x) = c - (x - x_bar)^T P (x - x_bar) >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticBackupSet {
    pub shape: Matrix4<f64>,
    pub level: f64,
    pub center: State,
}

impl QuadraticBackupSet {
    pub fn new(shape: Matrix4<f64>, level: f64, center: State) -> Result<Self> {
        let set = Self { shape, level, center };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level.is_finite() && self.level > 0.0) {
            return Err(Error::InvalidArgument("backup set level must be positive"));
        }
        if (self.shape - self.shape.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument("backup set shape must be symmetric"));
        }
        let min_eig = self.shape.symmetric_eigenvalues().min();
        if !(min_eig > 0.0) {
            return Err(Error::InvalidArgument("backup set shape must be positive definite"));
        }
        Ok(())
    }

    pub fn with_center(mut self, center: State) -> Self {
        self.center = center;
        self
    }

    pub fn value(&self, s: &State) -> f64 {
        let z = s.to_vector() - self.center.to_vector();
        self.level - z.dot(&(self.shape * z))
    }

    pub fn gradient(&self, s: &State) -> Vector4<f64> {
        let z = s.to_vector() - self.center.to_vector();
        -(self.shape * z) * 2.0
    }

    /// Largest position offset from the center over the ellipsoid,
    /// `sqrt(c e1^T P^{-1} e1)`.
    pub fn position_radius(&self) -> f64 {
        let inv = self.shape.try_inverse().unwrap_or_else(|| Matrix4::from_element(f64::NAN));
        sqrt(self.level * inv[(0, 0)])
    }
}

/// Moves the backup-set center to the current position without letting the
/// ellipsoid cross the safe-set boundary.
pub fn translate_center(set: &QuadraticBackupSet, safe: &SafeSetSpec, current_position: f64) -> State {
    let limit = safe.x_max - set.position_radius();
    set.center.with_position(current_position.min(limit))
}

/// Largest level `c` with `|K z| <= limit` on `{z^T P z <= c}`:
/// `c = limit^2 / (K P^{-1} K^T)`.
pub fn saturation_level<const N: usize>(
    gain: &SMatrix<f64, 1, N>,
    shape: &SMatrix<f64, N, N>,
    limit: f64,
) -> Result<f64> {
    let inv = shape
        .try_inverse()
        .ok_or(Error::InvalidArgument("Lyapunov matrix must be invertible"))?;
    let q = (gain * inv * gain.transpose())[0];
    if !(q > 0.0) {
        return Err(Error::InvalidArgument("gain must be nonzero"));
    }
    Ok(limit * limit / q)
}

/// Settings for the sampled invariance certificate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificationSettings {
    pub n_samples: usize,
    pub seed: u64,
    pub horizon: f64,
    pub dt: f64,
    /// Lyapunov value must be nonincreasing after this time.
    pub transient: f64,
}

impl Default for CertificationSettings {
    fn default() -> Self {
        Self { n_samples: 500, seed: 0, horizon: 1.0, dt: 1e-3, transient: 0.1 }
    }
}

/// Deterministic points on the unit-level ellipsoid `{z^T P z = 1}`.
pub fn ellipsoid_boundary_directions<const N: usize>(
    shape: &SMatrix<f64, N, N>,
    count: usize,
    seed: u64,
) -> Vec<SVector<f64, N>> {
    let seq = Halton::<N>::new(seed);
    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    while out.len() < count {
        let d = seq.point(i).map(|v| 2.0 * v - 1.0);
        i += 1;
        let q = d.dot(&(shape * d));
        if d.norm() < 1e-3 || !(q > 0.0) {
            continue;
        }
        out.push(d / sqrt(q));
    }
    out
}

/// Halves `c_start` until every sampled boundary state stays inside the
/// sublevel set for the whole horizon, with a nonincreasing Lyapunov value
/// after the transient, and satisfies `accept` at every step.
///
/// `step` advances the closed loop in error coordinates by `settings.dt`.
pub fn certify_level<const N: usize>(
    shape: &SMatrix<f64, N, N>,
    c_start: f64,
    settings: &CertificationSettings,
    mut step: impl FnMut(&SVector<f64, N>) -> Result<SVector<f64, N>>,
    mut accept: impl FnMut(f64, &SVector<f64, N>) -> bool,
) -> Result<f64> {
    if !(settings.dt > 0.0 && settings.horizon >= 0.0) {
        return Err(Error::InvalidArgument("certification needs dt > 0 and horizon >= 0"));
    }
    let dirs = ellipsoid_boundary_directions(shape, settings.n_samples, settings.seed);
    let n_steps = crate::math::round(settings.horizon / settings.dt) as usize;
    let transient_steps = crate::math::round(settings.transient / settings.dt) as usize;
    let lyap = |z: &SVector<f64, N>| z.dot(&(shape * z));

    let mut c = c_start;
    'level: while c >= MIN_LEVEL {
        let scale = sqrt(c);
        let tol = 1e-12 * c;
        for d in &dirs {
            let mut z = d * scale;
            let mut v_prev = lyap(&z);
            if !accept(c, &z) {
                c *= 0.5;
                continue 'level;
            }
            for k in 0..n_steps {
                z = match step(&z) {
                    Ok(z) => z,
                    Err(_) => {
                        c *= 0.5;
                        continue 'level;
                    }
                };
                let v = lyap(&z);
                let rising = k + 1 > transient_steps && v > v_prev + tol;
                if v > c + tol || rising || !accept(c, &z) {
                    c *= 0.5;
                    continue 'level;
                }
                v_prev = v;
            }
        }
        return Ok(c);
    }
    Err(Error::EmptySet(MIN_LEVEL))
}

/// Quadratic backup set from the Lyapunov matrix of the unsaturated closed
/// loop: the saturation-free level, shrunk by sampled certification of the
/// saturated nonlinear closed loop with the ellipsoid pushed against the
/// safe-set boundary.
pub fn synthesize_backup_set(
    params: &SegwayParams,
    policy: &BackupPolicy,
    p_lyap: &Matrix4<f64>,
    safe: &SafeSetSpec,
    settings: &CertificationSettings,
) -> Result<QuadraticBackupSet> {
    let p = symmetrize(&to_dmatrix(p_lyap));
    let shape = Matrix4::from_fn(|i, j| p[(i, j)]);
    let c_sat = saturation_level(&policy.gain, &shape, policy.torque_limit)?;
    let origin = policy.template.with_position(0.0);
    let inv00 = shape
        .try_inverse()
        .ok_or(Error::InvalidArgument("Lyapunov matrix must be invertible"))?[(0, 0)];

    let step = |z: &Vector4<f64>| -> Result<Vector4<f64>> {
        let s = State::from_vector(&(origin.to_vector() + z));
        let u = backup_control(policy, &s, &origin);
        let next = dynamics::step(params, &s, u, settings.dt, Integrator::Rk4)?;
        Ok(next.to_vector() - origin.to_vector())
    };
    // with the center at x_max - r_pos, h = r_pos - z_position
    let accept = |c: f64, z: &Vector4<f64>| {
        let r_pos = sqrt(c * inv00);
        let h = safe.x_max - ((safe.x_max - r_pos) + z[0]);
        h >= -1e-12
    };
    let level = certify_level(&shape, c_sat, settings, step, accept)?;
    QuadraticBackupSet::new(shape, level, origin)
}
