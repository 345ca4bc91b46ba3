//! Digital twin engine for unbalanced low/medium-voltage distribution networks.
//!
//! The crate models a monitored distribution network end to end: a validated
//! three-phase network description, a Newton power-flow solver in rectangular
//! coordinates, telemetry utilities that reproduce the accuracy envelope of
//! panel power meters, a weighted-least-squares state estimator that tolerates
//! partial observability, and export-limit studies built on a linearised
//! voltage-rise model.
//!
//! The quickest way in is the `examples/` directory; each example is a
//! self-contained run of one capability:
//!
//! - `cargo run --example feeder_powerflow` - parse a network file and solve
//!   the baseload operating point.
//! - `cargo run --example voltage_sensitivity` - linearise around a solved
//!   state and compare predicted vs. nonlinear voltage rise.
//! - `cargo run --example meter_synthesis` - synthesise meter readings with
//!   tolerance-derived noise.
//! - `cargo run --example data_quality` - screen telemetry for stuck, stepped
//!   and grossly wrong channels.
//! - `cargo run --example state_estimation` - estimate bus voltages from
//!   noisy, partially observable measurements.
//! - `cargo run --example tap_recovery` - recover an unknown transformer tap
//!   position from measured voltages.
//! - `cargo run --example export_limits` - size curtailment recovery under
//!   three export-limitation schemes.
//!
//! The same capabilities are scriptable through the thin `gridtwin` binary
//! (`powerflow`, `dsse`, `quality`, `synth`, `export-limit`, `tap-sweep`).
//! File formats are documented in `docs/formats.md`.

pub mod dsse;
pub mod exportlimit;
pub mod netmodel;
pub mod phase;
pub mod powerflow;
pub mod run;
pub mod telemetry;

pub use phase::{Phase, PhaseSet};
