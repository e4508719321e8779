//! Offline synthesis of everything a filter needs, frozen into one value.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use crate::backup_flow::FlowSettings;
use crate::dynamics::SegwayParams;
use crate::linear_control::{
    solve_lyapunov, synthesize_backup_set, BackupPolicy, CertificationSettings, LqrWeights, QuadraticBackupSet, SafeSetSpec,
};
use crate::robustness::{
    estimate_bundle, mu_bound, sup_backup_speed, EpsilonProvider, LipschitzBundle, RowEvaluator, SpeedNorm, StateBox,
};
use crate::math::{sqrt, to_dmatrix};
use crate::{Error, Result};

/// Span of positions sampled below the translation limit.
const POSITION_SPAN: f64 = 3.0;

/// Sampling box over the region where the backup-set center follows the
/// position: positions up to `x_max - r_pos`, other coordinates over the
/// ellipsoid's bounding box.
pub fn default_sample_box(set: &QuadraticBackupSet, safe: &SafeSetSpec) -> StateBox {
    let inv = set.shape.try_inverse().unwrap_or_else(|| Matrix4::from_element(f64::NAN));
    let half = Vector4::from_fn(|i, _| sqrt(set.level * inv[(i, i)]));
    let top = safe.x_max - set.position_radius();
    let center = set.center.to_vector();
    let mut lo = center - half;
    let mut hi = center + half;
    lo[0] = top - POSITION_SPAN;
    hi[0] = top;
    StateBox::new(lo, hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSettings {
    pub weights: LqrWeights,
    /// Diagonal of `Q_L` in `A_cl^T P + P A_cl = -Q_L` for the backup set shape.
    pub lyapunov_weights: [f64; 4],
    pub certification: CertificationSettings,
    pub flow: FlowSettings,
    /// Slope of the linear class-K function `alpha(r) = gamma r`.
    pub gamma: f64,
    /// Sampling box for Lipschitz constants and the backup speed. `None`
    /// derives it from the backup set, see [`default_sample_box`].
    pub sample_box: Option<StateBox>,
    /// State axes the measurement error can move; Lipschitz constants are
    /// taken along these only.
    pub error_axes: Vec<usize>,
    pub n_samples: usize,
    pub seed: u64,
    pub inflation: f64,
    /// Measure the backup speed along `grad h` only instead of the full norm.
    pub projected_speed: bool,
    pub epsilon: EpsilonProvider,
    pub slack_weight: f64,
    pub solver_tol: f64,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        Self {
            weights: LqrWeights::default(),
            lyapunov_weights: [0.01, 1.0, 1.0, 10.0],
            certification: CertificationSettings::default(),
            flow: FlowSettings::default(),
            gamma: 5.0,
            sample_box: None,
            error_axes: alloc::vec![0],
            n_samples: 1000,
            seed: 0,
            inflation: 1.2,
            projected_speed: true,
            epsilon: EpsilonProvider::Constant(0.4),
            slack_weight: 1e4,
            solver_tol: 1e-9,
        }
    }
}

impl SynthesisSettings {
    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument("gamma must be positive"));
        }
        if !(self.slack_weight > 0.0 && self.slack_weight.is_finite()) {
            return Err(Error::InvalidArgument("slack weight must be positive"));
        }
        if !self.lyapunov_weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument("Lyapunov weights must be positive"));
        }
        if self.error_axes.iter().any(|&a| a >= 4) {
            return Err(Error::InvalidArgument("error axis out of range"));
        }
        Ok(())
    }
}

/// Frozen inputs of [`crate::safety_filters::filter_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterContext {
    pub params: SegwayParams,
    pub policy: BackupPolicy,
    /// Backup set with its center at the policy template; translated per tick.
    pub backup_set: QuadraticBackupSet,
    pub safe: SafeSetSpec,
    pub flow: FlowSettings,
    pub bundle: LipschitzBundle,
    /// Box the bundle and `mu` were sampled on.
    pub sample_box: StateBox,
    pub epsilon: EpsilonProvider,
    pub mu: f64,
    pub gamma: f64,
    pub slack_weight: f64,
    pub solver_tol: f64,
}

impl FilterContext {
    /// LQR, certified backup set, Lipschitz bundle and tightening `mu`.
    pub fn synthesize(params: &SegwayParams, safe: &SafeSetSpec, settings: &SynthesisSettings) -> Result<Self> {
        settings.validate()?;
        let (policy, _) = BackupPolicy::lqr(params, &settings.weights)?;
        let a_cl = to_dmatrix(&policy.closed_loop_matrix(params)?);
        let q_l = DMatrix::from_diagonal(&DVector::from_column_slice(&settings.lyapunov_weights));
        let p_lyap = solve_lyapunov(&a_cl, &q_l)?;
        let p_lyap = Matrix4::from_fn(|i, j| p_lyap[(i, j)]);
        let backup_set = synthesize_backup_set(params, &policy, &p_lyap, safe, &settings.certification)?;
        let sample_box = settings.sample_box.unwrap_or_else(|| default_sample_box(&backup_set, safe));
        let bundle = Self::estimate_bundle(params, &policy, &backup_set, safe, &sample_box, settings)?;
        let norm = if settings.projected_speed { SpeedNorm::Along(safe.gradient()) } else { SpeedNorm::Full };
        let speed = sup_backup_speed(
            params,
            &policy,
            &backup_set,
            safe,
            &sample_box,
            settings.n_samples,
            settings.seed,
            settings.inflation,
            norm,
        )?;
        let mu = mu_bound(settings.flow.constraint_spacing(), safe.lipschitz(), speed);
        Ok(Self {
            sample_box,
            params: *params,
            policy,
            backup_set,
            safe: *safe,
            flow: settings.flow,
            bundle,
            epsilon: settings.epsilon,
            mu,
            gamma: settings.gamma,
            slack_weight: settings.slack_weight,
            solver_tol: settings.solver_tol,
        })
    }

    pub fn estimate_bundle(
        params: &SegwayParams,
        policy: &BackupPolicy,
        backup_set: &QuadraticBackupSet,
        safe: &SafeSetSpec,
        sample_box: &StateBox,
        settings: &SynthesisSettings,
    ) -> Result<LipschitzBundle> {
        let rows = RowEvaluator { params, policy, backup_set, safe, flow: &settings.flow };
        estimate_bundle(
            &rows,
            settings.gamma,
            sample_box,
            &settings.error_axes,
            settings.n_samples,
            settings.seed,
            settings.inflation,
        )
    }

    pub fn row_evaluator(&self) -> RowEvaluator<'_> {
        RowEvaluator {
            params: &self.params,
            policy: &self.policy,
            backup_set: &self.backup_set,
            safe: &self.safe,
            flow: &self.flow,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.backup_set.validate()?;
        self.flow.validate()?;
        self.bundle.validate()?;
        if self.bundle.rows.len() != self.flow.n_constraints + 1 {
            return Err(Error::DimensionMismatch { expected: self.flow.n_constraints + 1, found: self.bundle.rows.len() });
        }
        if !(self.mu >= 0.0 && self.gamma > 0.0 && self.slack_weight > 0.0) {
            return Err(Error::InvalidArgument("mu, gamma and slack weight out of range"));
        }
        Ok(())
    }
}
