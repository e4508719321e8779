//! Measurement-error models, the error bound `epsilon`, sampled Lipschitz
//! constants, the grid tightening `mu`, and the robust row parameters
//! `a = (L_lf + L_alpha L_value) eps`, `b = L_lg eps`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{SVector, Vector4};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::backup_flow::{constraint_data, flow_with_sensitivity, FlowSettings, RowKind};
use crate::dynamics::{self, SegwayParams, State};
use crate::linear_control::{backup_control, translate_center, BackupPolicy, QuadraticBackupSet, SafeSetSpec};
use crate::math::sqrt;
use crate::sampling::{unit_f64, AxisBox, Halton};
use crate::{Error, Result};

/// Central-difference step used by every sampled Lipschitz estimate.
pub const FD_STEP: f64 = 1e-5;

pub type StateBox = AxisBox<4>;

/// How the state estimate relates to the true state: `x_hat = x + e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorModel {
    Identity,
    ConstantBias(Vector4<f64>),
    /// Uniform in the ball of the given radius; draws depend only on
    /// `(seed, tick)`.
    BoundedUniform { radius: f64, seed: u64 },
}

impl ErrorModel {
    /// Error for the measurement taken at `tick`.
    pub fn error(&self, tick: u64) -> Vector4<f64> {
        match *self {
            ErrorModel::Identity => Vector4::zeros(),
            ErrorModel::ConstantBias(e) => e,
            ErrorModel::BoundedUniform { radius, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(tick);
                loop {
                    let d = Vector4::from_fn(|_, _| 2.0 * unit_f64(rng.next_u64()) - 1.0);
                    if d.norm_squared() <= 1.0 {
                        return d * radius;
                    }
                }
            }
        }
    }

    /// Largest error norm the model can produce.
    pub fn max_error_norm(&self) -> f64 {
        match *self {
            ErrorModel::Identity => 0.0,
            ErrorModel::ConstantBias(e) => e.norm(),
            ErrorModel::BoundedUniform { radius, .. } => radius,
        }
    }

    /// State axes along which the error can be nonzero.
    pub fn support_axes(&self) -> Vec<usize> {
        match *self {
            ErrorModel::Identity => Vec::new(),
            ErrorModel::ConstantBias(e) => (0..4).filter(|&i| e[i] != 0.0).collect(),
            ErrorModel::BoundedUniform { .. } => (0..4).collect(),
        }
    }
}

/// What the controller receives: the reconstructed state and the tick it
/// was taken at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub estimate: State,
    pub tick: u64,
}

pub fn apply_measurement(model: &ErrorModel, s_true: &State, tick: u64) -> Measurement {
    let estimate = State::from_vector(&(s_true.to_vector() + model.error(tick)));
    Measurement { estimate, tick }
}

/// Upper bound on the estimate error norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonProvider {
    Constant(f64),
}

impl EpsilonProvider {
    pub fn epsilon_of(&self, _y: &Measurement) -> f64 {
        match *self {
            EpsilonProvider::Constant(v) => v,
        }
    }

    /// Checks that the bound covers every error the model can produce.
    pub fn validate_against(&self, model: &ErrorModel) -> Result<()> {
        let EpsilonProvider::Constant(v) = *self;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument("epsilon must be finite and non-negative"));
        }
        if v < model.max_error_norm() {
            return Err(Error::InvalidArgument("epsilon is smaller than the error model's bound"));
        }
        Ok(())
    }
}

fn check_sampling<const N: usize>(domain: &AxisBox<N>, n: usize, inflation: f64) -> Result<()> {
    if n < 100 {
        return Err(Error::InvalidArgument("at least 100 samples are required"));
    }
    if !domain.is_non_degenerate() {
        return Err(Error::InvalidArgument("sampling box is degenerate"));
    }
    if !(inflation >= 1.0 && inflation.is_finite()) {
        return Err(Error::InvalidArgument("inflation must be at least 1"));
    }
    Ok(())
}

/// Per-output Lipschitz estimates of a vector-valued function: `inflation`
/// times the largest 2-norm of the central-difference gradient over `n`
/// seeded Halton points in `domain`, with the gradient restricted to `axes`.
pub fn estimate_lipschitz_many<const N: usize>(
    mut f: impl FnMut(&SVector<f64, N>) -> Result<Vec<f64>>,
    domain: &AxisBox<N>,
    axes: &[usize],
    n: usize,
    seed: u64,
    inflation: f64,
) -> Result<Vec<f64>> {
    check_sampling(domain, n, inflation)?;
    if axes.iter().any(|&a| a >= N) {
        return Err(Error::InvalidArgument("axis index out of range"));
    }
    let seq = Halton::<N>::new(seed);
    let mut best: Vec<f64> = Vec::new();
    let mut grad_sq: Vec<f64> = Vec::new();
    for i in 0..n as u64 {
        let x = domain.map_unit(&seq.point(i));
        grad_sq.iter_mut().for_each(|g| *g = 0.0);
        for &axis in axes {
            let mut plus = x;
            let mut minus = x;
            plus[axis] += FD_STEP;
            minus[axis] -= FD_STEP;
            let fp = f(&plus)?;
            let fm = f(&minus)?;
            if fp.len() != fm.len() {
                return Err(Error::DimensionMismatch { expected: fp.len(), found: fm.len() });
            }
            if grad_sq.is_empty() {
                grad_sq = vec![0.0; fp.len()];
                best = vec![0.0; fp.len()];
            }
            if fp.len() != grad_sq.len() {
                return Err(Error::DimensionMismatch { expected: grad_sq.len(), found: fp.len() });
            }
            for (k, (a, b)) in fp.iter().zip(&fm).enumerate() {
                if !(a.is_finite() && b.is_finite()) {
                    return Err(Error::NonFinite("sampled function"));
                }
                let d = (a - b) / (2.0 * FD_STEP);
                grad_sq[k] += d * d;
            }
        }
        for (b, g) in best.iter_mut().zip(&grad_sq) {
            *b = b.max(sqrt(*g));
        }
    }
    Ok(best.into_iter().map(|b| b * inflation).collect())
}

/// Sampled Lipschitz constant of a scalar function over a box.
pub fn estimate_lipschitz<const N: usize>(
    mut f: impl FnMut(&SVector<f64, N>) -> Result<f64>,
    domain: &AxisBox<N>,
    n: usize,
    seed: u64,
    inflation: f64,
) -> Result<f64> {
    let axes: Vec<usize> = (0..N).collect();
    let out = estimate_lipschitz_many(|x| Ok(vec![f(x)?]), domain, &axes, n, seed, inflation)?;
    Ok(out[0])
}

/// Which part of the closed-loop velocity enters the speed bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpeedNorm {
    /// Full 2-norm of `f + g k_B`.
    Full,
    /// Component along a unit direction, e.g. the direction of `grad h`.
    Along(Vector4<f64>),
}

/// Inflated maximum closed-loop speed `|| f(x) + g(x) k_B(x) ||` over `n`
/// Halton samples of the box, with the backup-set center translated to each
/// sample as the filter does.
#[allow(clippy::too_many_arguments)]
pub fn sup_backup_speed(
    params: &SegwayParams,
    policy: &BackupPolicy,
    backup_set: &QuadraticBackupSet,
    safe: &SafeSetSpec,
    domain: &StateBox,
    n: usize,
    seed: u64,
    inflation: f64,
    norm: SpeedNorm,
) -> Result<f64> {
    check_sampling(domain, n, inflation)?;
    let seq = Halton::<4>::new(seed);
    let mut best = 0.0f64;
    for i in 0..n as u64 {
        let x = State::from_vector(&domain.map_unit(&seq.point(i)));
        let center = translate_center(backup_set, safe, x.position);
        let u = backup_control(policy, &x, &center);
        let v = dynamics::vector_field(params, &x, u)?;
        let speed = match norm {
            SpeedNorm::Full => v.norm(),
            SpeedNorm::Along(d) => v.dot(&d).abs(),
        };
        if !speed.is_finite() {
            return Err(Error::NonFinite("closed-loop speed"));
        }
        best = best.max(speed);
    }
    Ok(best * inflation)
}

/// Smallest admissible tightening: `mu = (delta_t / 2) L_h speed`.
pub fn mu_bound(delta_t: f64, l_h: f64, speed: f64) -> f64 {
    0.5 * delta_t * l_h * speed
}

/// Lipschitz constants of one constraint row's value and Lie derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RowLipschitz {
    pub value: f64,
    pub lie_f: f64,
    pub lie_g: f64,
}

/// Lipschitz constants for every row, ordered like the constraint data
/// (trajectory rows, then the terminal row).
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzBundle {
    pub rows: Vec<RowLipschitz>,
    /// Lipschitz constant of the class-K function `alpha`.
    pub alpha: f64,
    /// Lipschitz constant of `h`.
    pub h: f64,
}

impl LipschitzBundle {
    pub fn validate(&self) -> Result<()> {
        let entries = self
            .rows
            .iter()
            .flat_map(|r| [r.value, r.lie_f, r.lie_g])
            .chain([self.alpha, self.h]);
        for v in entries {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument("Lipschitz constants must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Row names: `tau0`, `tau1`, ..., `B`.
    pub fn row_name(index: usize, n_rows: usize) -> alloc::string::String {
        if index + 1 == n_rows {
            "B".into()
        } else {
            alloc::format!("tau{index}")
        }
    }
}

/// Robust row parameters `(a_r, b_r)`.
pub fn mr_parameters(bundle: &LipschitzBundle, eps: f64) -> Vec<(f64, f64)> {
    bundle
        .rows
        .iter()
        .map(|r| ((r.lie_f + bundle.alpha * r.value) * eps, r.lie_g * eps))
        .collect()
}

/// Everything needed to evaluate the implicit-set rows at an arbitrary state.
#[derive(Debug, Clone, Copy)]
pub struct RowEvaluator<'a> {
    pub params: &'a SegwayParams,
    pub policy: &'a BackupPolicy,
    pub backup_set: &'a QuadraticBackupSet,
    pub safe: &'a SafeSetSpec,
    pub flow: &'a FlowSettings,
}

impl RowEvaluator<'_> {
    /// `(value, lie_f, lie_g)` of every row at `x`, with the backup-set
    /// center translated to `x`.
    pub fn rows(&self, x: &State) -> Result<Vec<(f64, f64, f64)>> {
        let center = translate_center(self.backup_set, self.safe, x.position);
        let set = self.backup_set.with_center(center);
        let grid = flow_with_sensitivity(self.params, self.policy, &set, x, self.flow)?;
        let cd = constraint_data(&grid, self.safe, &set, self.params)?;
        Ok(cd.rows.iter().map(|r| (r.value, r.lie_f, r.lie_g)).collect())
    }

    pub fn n_rows(&self) -> usize {
        self.flow.n_constraints + 1
    }
}

/// Samples every row's value, `L_f` and `L_g` Lipschitz constants over the
/// box along the given error axes.
pub fn estimate_bundle(
    rows: &RowEvaluator<'_>,
    gamma: f64,
    domain: &StateBox,
    axes: &[usize],
    n: usize,
    seed: u64,
    inflation: f64,
) -> Result<LipschitzBundle> {
    let flat = estimate_lipschitz_many(
        |x| {
            let r = rows.rows(&State::from_vector(x))?;
            Ok(r.iter().flat_map(|(v, f, g)| [*v, *f, *g]).collect())
        },
        domain,
        axes,
        n,
        seed,
        inflation,
    )?;
    let mut out = Vec::with_capacity(flat.len() / 3);
    for c in flat.chunks(3) {
        out.push(RowLipschitz { value: c[0], lie_f: c[1], lie_g: c[2] });
    }
    // an empty axis set means no error can occur
    if out.is_empty() {
        out = vec![RowLipschitz::default(); rows.n_rows()];
    }
    Ok(LipschitzBundle { rows: out, alpha: gamma, h: rows.safe.lipschitz() })
}

/// Row labels in bundle order, for serialization.
pub fn row_kinds(flow: &FlowSettings) -> Vec<RowKind> {
    let mut out: Vec<RowKind> = (0..flow.n_constraints)
        .map(|j| RowKind::Trajectory { index: j, tau: j as f64 * flow.constraint_spacing() })
        .collect();
    out.push(RowKind::Terminal);
    out
}
