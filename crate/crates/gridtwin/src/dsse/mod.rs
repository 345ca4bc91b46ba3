//! Distribution system state estimation: turning a batch of imperfect meter
//! readings into the most likely network state, judging which parts of the
//! network the meters can actually see, and recovering off-nominal tap
//! positions by fitting simulations against measurements.

mod assemble;
mod inputs;
pub(crate) mod measurement;
mod observe;
mod solve;
mod sweep;

pub use assemble::{assemble_measurements, gauge_equations, AssembleOptions};
pub use inputs::{allocate_loads, measured_powerflow_inputs, AllocationOutcome};
pub use measurement::{MeasurementEquation, MeasurementKind};
pub use observe::{analyze_observability, ObservabilityReport};
pub use solve::{estimate_state, EstimatorOptions, ResidualEntry, StateEstimate};
pub use sweep::{
    correct_taps, sweep_tap_positions, TapCorrection, TapCorrectionReport, TapSweepResult,
};

use chrono::{DateTime, Utc};

use crate::netmodel::NetError;
use crate::powerflow::PfError;
use crate::telemetry::TelemetryError;

#[derive(Debug, thiserror::Error)]
pub enum DsseError {
    #[error(transparent)]
    Model(#[from] NetError),
    #[error(transparent)]
    Power(#[from] PfError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("meter {meter} cannot be placed: {detail}")]
    MeterPlacement { meter: String, detail: String },
    #[error("no meter produced a reading at {timestamp}")]
    NoMeterData { timestamp: DateTime<Utc> },
    #[error("slack bus {bus} inputs unavailable: {detail}")]
    SlackData { bus: String, detail: String },
    #[error("unknown transformer {id}")]
    UnknownTransformer { id: String },
    #[error("tap sweep found no usable line voltage readings to compare against")]
    NoSweepReadings,
    #[error("no measurement equations supplied")]
    NoMeasurements,
    #[error("bad measurement equation from {origin}: {detail}")]
    BadEquation { origin: String, detail: String },
    #[error(
        "estimator did not converge in {iterations} iterations \
         (objective {objective:.3e}, gradient orthogonality {gradient:.3e})"
    )]
    NotConverged {
        iterations: usize,
        objective: f64,
        gradient: f64,
    },
    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),
}
