//! Safety filters for a planar wheeled inverted pendulum.
//!
//! The crate builds an implicit control-invariant set from backup trajectories
//! of a saturated LQR controller, and enforces it with small conic programs
//! over the wheel torque. Three filters share the same machinery:
//!
//! * a plain control-barrier-function QP on `h` alone,
//! * the backup-set QP with constraint tightening `mu`,
//! * the measurement-robust backup-set program, which adds `a + b‖u‖`
//!   to every row so the constraints hold for every true state within
//!   `epsilon` of the estimate.
//!
//! Everything here is pure computation on owned values. The crate is
//! `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backup_flow;
pub mod context;
pub mod dynamics;
mod error;
pub mod linear_control;
pub mod math;
pub mod robustness;
pub mod safety_filters;
pub mod sampling;

pub use backup_flow::{ConstraintData, ConstraintRow, FlowGrid, FlowSettings, Membership, RowKind};
pub use context::{FilterContext, SynthesisSettings};
pub use dynamics::{Deriv, Integrator, SegwayParams, State};
pub use error::{Error, Result};
pub use linear_control::{BackupPolicy, LqrWeights, QuadraticBackupSet, SafeSetSpec};
pub use robustness::{EpsilonProvider, ErrorModel, LipschitzBundle, Measurement, StateBox};
pub use safety_filters::{
    ConeRow, ConicProgram, FilterKind, FilterOutput, FilterSolution, RowLabel, SolveStatus,
};
