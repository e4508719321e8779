//! Planar wheeled-inverted-pendulum model in control-affine form.
//!
//! Generalized coordinates are the wheel position `x` and body pitch `psi`
//! (zero upright, positive leaning forward). The wheel torque `u` enters as
//!
//! ```text
//! m_t x'' + m_b L cos(psi) psi'' - m_b L sin(psi) psi'^2 + b_w x' = u / R
//! m_b L cos(psi) x'' + J_t psi'' - m_b g L sin(psi) + b_psi psi'  = -u
//! ```
//!
//! with `m_t = m_b + m_w` and `J_t = J_b + m_b L^2`.

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};

use crate::math::{cos, sin, wrap_angle};
use crate::{Error, Result};

/// Time derivative of a [`State`], ordered like [`State::to_vector`].
pub type Deriv = Vector4<f64>;

const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State {
    pub position: f64,
    pub velocity: f64,
    pub pitch: f64,
    pub pitch_rate: f64,
}

impl State {
    pub const fn new(position: f64, velocity: f64, pitch: f64, pitch_rate: f64) -> Self {
        Self { position, velocity, pitch, pitch_rate }
    }

    pub const fn upright_at(position: f64) -> Self {
        Self::new(position, 0.0, 0.0, 0.0)
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.position, self.velocity, self.pitch, self.pitch_rate)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.velocity.is_finite()
            && self.pitch.is_finite()
            && self.pitch_rate.is_finite()
    }

    pub fn with_position(mut self, position: f64) -> Self {
        self.position = position;
        self
    }
}

/// Physical constants of the Segway.
///
/// `wheel_assembly_mass` already includes the reflected rotor inertia
/// `J_w / R^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegwayParams {
    pub body_mass: f64,
    pub wheel_assembly_mass: f64,
    pub body_inertia: f64,
    pub com_distance: f64,
    pub wheel_radius: f64,
    pub gravity: f64,
    pub viscous_friction_wheel: f64,
    pub viscous_friction_pitch: f64,
    pub torque_limit: f64,
}

impl Default for SegwayParams {
    fn default() -> Self {
        Self::nominal()
    }
}

impl SegwayParams {
    pub const fn nominal() -> Self {
        Self {
            body_mass: 45.0,
            wheel_assembly_mass: 5.0,
            body_inertia: 4.0,
            com_distance: 0.8,
            wheel_radius: 0.2,
            gravity: 9.81,
            viscous_friction_wheel: 0.1,
            viscous_friction_pitch: 0.1,
            torque_limit: 20.0,
        }
    }

    pub const fn frictionless() -> Self {
        let mut p = Self::nominal();
        p.viscous_friction_wheel = 0.0;
        p.viscous_friction_pitch = 0.0;
        p
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.body_mass, "body_mass must be positive"),
            (self.wheel_assembly_mass, "wheel_assembly_mass must be positive"),
            (self.body_inertia, "body_inertia must be positive"),
            (self.com_distance, "com_distance must be positive"),
            (self.wheel_radius, "wheel_radius must be positive"),
            (self.gravity, "gravity must be positive"),
            (self.torque_limit, "torque_limit must be positive"),
        ];
        for (v, msg) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(msg));
            }
        }
        for (v, msg) in [
            (self.viscous_friction_wheel, "viscous_friction_wheel must be non-negative"),
            (self.viscous_friction_pitch, "viscous_friction_pitch must be non-negative"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParams(msg));
            }
        }
        Ok(())
    }

    fn total_mass(&self) -> f64 {
        self.body_mass + self.wheel_assembly_mass
    }

    fn total_inertia(&self) -> f64 {
        self.body_inertia + self.body_mass * self.com_distance * self.com_distance
    }

    fn coupling(&self) -> f64 {
        self.body_mass * self.com_distance
    }

    /// Generalized mass matrix for `q = (x, psi)`.
    pub fn mass_matrix(&self, pitch: f64) -> Matrix2<f64> {
        let c = self.coupling() * cos(pitch);
        Matrix2::new(self.total_mass(), c, c, self.total_inertia())
    }

    pub fn clamp_torque(&self, u: f64) -> f64 {
        u.clamp(-self.torque_limit, self.torque_limit)
    }
}

/// Inverse of the mass matrix plus its pitch derivative.
struct MassSolve {
    inv: Matrix2<f64>,
    d_mass: Matrix2<f64>,
}

fn mass_solve(p: &SegwayParams, pitch: f64) -> Result<MassSolve> {
    let m = p.mass_matrix(pitch);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if !det.is_finite() {
        return Err(Error::NonFinite("mass matrix"));
    }
    if det.abs() < SINGULAR_DET {
        return Err(Error::MassMatrixSingular { det });
    }
    let inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
    let s = -p.coupling() * sin(pitch);
    Ok(MassSolve { inv, d_mass: Matrix2::new(0.0, s, s, 0.0) })
}

fn drift_rhs(p: &SegwayParams, s: &State) -> Vector2<f64> {
    let ml = p.coupling();
    let sp = sin(s.pitch);
    Vector2::new(
        -p.viscous_friction_wheel * s.velocity + ml * sp * s.pitch_rate * s.pitch_rate,
        ml * p.gravity * sp - p.viscous_friction_pitch * s.pitch_rate,
    )
}

fn input_rhs(p: &SegwayParams) -> Vector2<f64> {
    Vector2::new(1.0 / p.wheel_radius, -1.0)
}

fn check(d: Deriv, what: &'static str) -> Result<Deriv> {
    if d.iter().all(|v| v.is_finite()) {
        Ok(d)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Unforced vector field `f(x)`.
pub fn drift(p: &SegwayParams, s: &State) -> Result<Deriv> {
    let ms = mass_solve(p, s.pitch)?;
    let acc = ms.inv * drift_rhs(p, s);
    check(Vector4::new(s.velocity, acc[0], s.pitch_rate, acc[1]), "drift")
}

/// Input column `g(x)`. Depends on pitch only.
pub fn actuation(p: &SegwayParams, s: &State) -> Result<Deriv> {
    let ms = mass_solve(p, s.pitch)?;
    let acc = ms.inv * input_rhs(p);
    check(Vector4::new(0.0, acc[0], 0.0, acc[1]), "actuation")
}

/// Full vector field `f(x) + g(x) u`. The torque is used as given.
pub fn vector_field(p: &SegwayParams, s: &State, u: f64) -> Result<Deriv> {
    let f = drift(p, s)?;
    let g = actuation(p, s)?;
    check(f + g * u, "vector field")
}

/// Jacobian of the drift, `df/dx`.
pub fn drift_jacobian(p: &SegwayParams, s: &State) -> Result<Matrix4<f64>> {
    let ms = mass_solve(p, s.pitch)?;
    let ml = p.coupling();
    let (sp, cp) = (sin(s.pitch), cos(s.pitch));
    let acc = ms.inv * drift_rhs(p, s);

    let d_vel = ms.inv * Vector2::new(-p.viscous_friction_wheel, 0.0);
    let d_rate = ms.inv * Vector2::new(2.0 * ml * sp * s.pitch_rate, -p.viscous_friction_pitch);
    let d_pitch_rhs = Vector2::new(ml * cp * s.pitch_rate * s.pitch_rate, ml * p.gravity * cp);
    let d_pitch = ms.inv * (d_pitch_rhs - ms.d_mass * acc);

    let j = Matrix4::new(
        0.0, 1.0, 0.0, 0.0, //
        0.0, d_vel[0], d_pitch[0], d_rate[0], //
        0.0, 0.0, 0.0, 1.0, //
        0.0, d_vel[1], d_pitch[1], d_rate[1],
    );
    if j.iter().all(|v| v.is_finite()) {
        Ok(j)
    } else {
        Err(Error::NonFinite("drift jacobian"))
    }
}

/// Jacobian of the input column, `dg/dx`. Only the pitch column is nonzero.
pub fn actuation_jacobian(p: &SegwayParams, s: &State) -> Result<Matrix4<f64>> {
    let ms = mass_solve(p, s.pitch)?;
    let acc = ms.inv * input_rhs(p);
    let d_pitch = -(ms.inv * (ms.d_mass * acc));
    let mut j = Matrix4::zeros();
    j[(1, 2)] = d_pitch[0];
    j[(3, 2)] = d_pitch[1];
    Ok(j)
}

/// Linearization `(A, B)` of the unforced model at `s_eq`, with
/// `A = df/dx` and `B = g(s_eq)`.
pub fn linearize(p: &SegwayParams, s_eq: &State) -> Result<(Matrix4<f64>, Vector4<f64>)> {
    Ok((drift_jacobian(p, s_eq)?, actuation(p, s_eq)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

/// One explicit integration step with the torque clamped to the limit.
pub fn step(p: &SegwayParams, s: &State, u: f64, dt: f64, method: Integrator) -> Result<State> {
    if !(dt >= 0.0) {
        return Err(Error::InvalidArgument("dt must be non-negative"));
    }
    let u = p.clamp_torque(u);
    let x = s.to_vector();
    let next = match method {
        Integrator::Euler => x + vector_field(p, s, u)? * dt,
        Integrator::Rk4 => {
            let at = |v: Vector4<f64>| vector_field(p, &State::from_vector(&v), u);
            let k1 = at(x)?;
            let k2 = at(x + k1 * (0.5 * dt))?;
            let k3 = at(x + k2 * (0.5 * dt))?;
            let k4 = at(x + k3 * dt)?;
            x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
        }
    };
    let mut out = State::from_vector(&next);
    out.pitch = wrap_angle(out.pitch);
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite("integration step"))
    }
}

/// Mechanical energy, kinetic plus gravitational (zero at pitch = pi/2).
pub fn energy(p: &SegwayParams, s: &State) -> f64 {
    let qd = Vector2::new(s.velocity, s.pitch_rate);
    0.5 * qd.dot(&(p.mass_matrix(s.pitch) * qd)) + p.coupling() * p.gravity * cos(s.pitch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;

    fn cramer_oracle(p: &SegwayParams, s: &State) -> Vector4<f64> {
        // independent: Cramer's rule on the 2x2 system written out longhand
        let mt = p.body_mass + p.wheel_assembly_mass;
        let jt = p.body_inertia + p.body_mass * p.com_distance.powi(2);
        let c = p.body_mass * p.com_distance * s.pitch.cos();
        let r1 = -p.viscous_friction_wheel * s.velocity
            + p.body_mass * p.com_distance * s.pitch.sin() * s.pitch_rate.powi(2);
        let r2 = p.body_mass * p.gravity * p.com_distance * s.pitch.sin()
            - p.viscous_friction_pitch * s.pitch_rate;
        let det = mt * jt - c * c;
        Vector4::new(s.velocity, (r1 * jt - c * r2) / det, s.pitch_rate, (mt * r2 - c * r1) / det)
    }

    #[test]
    fn upright_rest_is_equilibrium() {
        let d = drift(&SegwayParams::frictionless(), &State::default()).unwrap();
        assert_eq!(d, Vector4::zeros());
    }

    #[test]
    fn gravity_destabilizes() {
        let d = drift(&SegwayParams::frictionless(), &State::new(0.0, 0.0, 0.05, 0.0)).unwrap();
        assert!(d[3] > 0.0);
    }

    #[test]
    fn drift_matches_cramer() {
        let p = SegwayParams::nominal();
        let s = State::new(0.0, 0.5, 0.1, -0.2);
        let d = drift(&p, &s).unwrap();
        let o = cramer_oracle(&p, &s);
        assert!((d - o).amax() < 1e-12, "{d} vs {o}");
    }

    #[test]
    fn actuation_depends_on_pitch_only() {
        let p = SegwayParams::nominal();
        let a = actuation(&p, &State::new(1.0, 0.3, 0.2, 0.0)).unwrap();
        let b = actuation(&p, &State::new(-4.0, -2.0, 0.2, 5.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn actuation_signs_upright() {
        let p = SegwayParams::nominal();
        let g = actuation(&p, &State::default()).unwrap();
        // oracle: M^-1 (1/R, -1) at psi = 0
        let mt = 50.0;
        let jt = 4.0 + 45.0 * 0.64;
        let c = 36.0;
        let det = mt * jt - c * c;
        let gx = (jt * 5.0 + c) / det;
        let gp = (-c * 5.0 - mt) / det;
        assert!(gx > 0.0 && gp < 0.0);
        assert!((g[1] - gx).abs() < 1e-14 && (g[3] - gp).abs() < 1e-14);
    }

    #[test]
    fn actuation_matches_flow_difference() {
        let p = SegwayParams::nominal();
        let s = State::new(0.0, 0.4, 0.1, -0.3);
        let delta = 1e-6;
        let with_u = step(&p, &s, 1.0, delta, Integrator::Rk4).unwrap().to_vector();
        let without = step(&p, &s, 0.0, delta, Integrator::Rk4).unwrap().to_vector();
        let fd = (with_u - without) / delta;
        let g = actuation(&p, &s).unwrap();
        assert!((fd - g).norm() <= 1e-4);
    }

    #[test]
    fn linearization_rows_and_input() {
        let p = SegwayParams::nominal();
        let (a, b) = linearize(&p, &State::default()).unwrap();
        assert_eq!(a.row(0).clone_owned(), nalgebra::RowVector4::new(0.0, 1.0, 0.0, 0.0));
        assert_eq!(a.row(2).clone_owned(), nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        assert_eq!(b, actuation(&p, &State::default()).unwrap());
    }

    fn fd_jacobian(f: impl Fn(&State) -> Deriv, s: &State) -> Matrix4<f64> {
        let h = 1e-6;
        let mut j = Matrix4::zeros();
        for k in 0..4 {
            let mut plus = s.to_vector();
            let mut minus = s.to_vector();
            plus[k] += h;
            minus[k] -= h;
            let col = (f(&State::from_vector(&plus)) - f(&State::from_vector(&minus))) / (2.0 * h);
            j.set_column(k, &col);
        }
        j
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = SegwayParams::nominal();
        for s in [State::default(), State::new(0.3, 0.5, 0.1, -0.2), State::new(-1.0, -1.0, -0.4, 1.5)] {
            let fd = fd_jacobian(|x| drift(&p, x).unwrap(), &s);
            assert!((drift_jacobian(&p, &s).unwrap() - fd).amax() <= 1e-5);
            let fd = fd_jacobian(|x| actuation(&p, x).unwrap(), &s);
            assert!((actuation_jacobian(&p, &s).unwrap() - fd).amax() <= 1e-5);
        }
    }

    #[test]
    fn zero_step_and_fixed_point() {
        let p = SegwayParams::nominal();
        let s = State::new(0.2, 0.3, 0.1, 0.0);
        assert_eq!(step(&p, &s, 5.0, 0.0, Integrator::Rk4).unwrap(), s);
        let rest = State::default();
        assert_eq!(step(&p, &rest, 0.0, 1e-3, Integrator::Euler).unwrap(), rest);
        assert_eq!(step(&p, &rest, 0.0, 1e-3, Integrator::Rk4).unwrap(), rest);
    }

    #[test]
    fn torque_is_clamped() {
        let p = SegwayParams::nominal();
        let s = State::default();
        let a = step(&p, &s, 500.0, 1e-3, Integrator::Euler).unwrap();
        let b = step(&p, &s, 20.0, 1e-3, Integrator::Euler).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_dt_rejected() {
        let p = SegwayParams::nominal();
        assert!(step(&p, &State::default(), 0.0, -1e-3, Integrator::Euler).is_err());
    }

    #[test]
    fn energy_examples() {
        let p = SegwayParams::nominal();
        assert!((energy(&p, &State::default()) - 45.0 * 9.81 * 0.8).abs() < 1e-12);
        assert!(energy(&p, &State::new(0.0, 0.0, FRAC_PI_2, 0.0)).abs() < 1e-12);
        let e = energy(&p, &State::new(0.0, 1.0, 0.0, 0.0));
        assert!((e - (0.5 * 50.0 + 45.0 * 9.81 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn energy_conserved_frictionless_rk4() {
        let p = SegwayParams::frictionless();
        let mut s = State::new(0.0, 0.0, 0.3, 0.0);
        let e0 = energy(&p, &s);
        for _ in 0..1000 {
            s = step(&p, &s, 0.0, 1e-3, Integrator::Rk4).unwrap();
        }
        assert!(((energy(&p, &s) - e0) / e0).abs() <= 1e-6);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = SegwayParams::nominal();
        p.com_distance = 0.0;
        assert!(p.validate().is_err());
        let mut p = SegwayParams::nominal();
        p.viscous_friction_pitch = -1.0;
        assert!(p.validate().is_err());
        assert!(SegwayParams::nominal().validate().is_ok());
    }

    #[test]
    fn shifting_position_changes_nothing() {
        let p = SegwayParams::nominal();
        let a = State::new(0.0, 0.4, 0.2, -0.1);
        let b = a.with_position(17.25);
        assert_eq!(drift(&p, &a).unwrap(), drift(&p, &b).unwrap());
        assert_eq!(actuation(&p, &a).unwrap(), actuation(&p, &b).unwrap());
    }
}
