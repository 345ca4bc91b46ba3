//! Instrument accuracy bounds.
//!
//! Each channel carries a worst-case error half-width derived from the meter
//! class. Voltage error scales with the reading. Current, active, and
//! reactive errors scale with the reading down to a floor at
//! `valid_current_floor_pct` of rated current, below which the absolute
//! bound stops shrinking. Power bounds are per phase and are referenced to
//! the rated phase voltage (line-line rating over sqrt(3)).
//!
//! Treating the bound as a 99.7% interval puts one standard deviation at a
//! third of it, which is how screening thresholds and estimator weights are
//! derived from the same numbers.

use super::MeterSpec;

/// Worst-case error half-width of a voltage reading, in volts.
pub fn voltage_tolerance_v(measured_v: f64, spec: &MeterSpec) -> f64 {
    spec.voltage_tol_pct / 100.0 * measured_v.abs()
}

/// Worst-case error half-width of a phase current reading, in amps.
pub fn current_tolerance_a(measured_a: f64, spec: &MeterSpec) -> f64 {
    spec.current_tol_pct / 100.0 * measured_a.abs().max(spec.current_floor_a())
}

/// Worst-case error half-width of one phase's active power, in watts.
///
/// The bound follows the phase current with the same rated-current floor as
/// the current channel, converted to power at rated phase voltage.
pub fn power_tolerance_w(phase_current_a: f64, spec: &MeterSpec) -> f64 {
    let rated_phase_v = spec.rated_voltage_v / 3.0_f64.sqrt();
    spec.active_tol_pct / 100.0
        * rated_phase_v
        * phase_current_a.abs().max(spec.current_floor_a())
}

/// Worst-case error half-width of one phase's reactive power, in vars.
pub fn reactive_tolerance_var(phase_current_a: f64, spec: &MeterSpec) -> f64 {
    let rated_phase_v = spec.rated_voltage_v / 3.0_f64.sqrt();
    spec.reactive_tol_pct / 100.0
        * rated_phase_v
        * phase_current_a.abs().max(spec.current_floor_a())
}

/// One standard deviation for a channel whose worst-case bound is `tolerance`.
pub fn sigma_from_tolerance(tolerance: f64) -> f64 {
    tolerance / 3.0
}

/// Distribute a total power reading over phases in proportion to the phase
/// current magnitudes. Falls back to an equal split when the currents are
/// unusable (all zero, or any non-finite).
pub fn split_total_power(total: f64, phase_currents_a: [f64; 3]) -> [f64; 3] {
    let weights: Vec<f64> = phase_currents_a.iter().map(|i| i.abs()).collect();
    let sum: f64 = weights.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        return [total / 3.0; 3];
    }
    [
        total * weights[0] / sum,
        total * weights[1] / sum,
        total * weights[2] / sum,
    ]
}
