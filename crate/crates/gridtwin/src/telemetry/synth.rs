//! Synthetic meter data from a solved network state.
//!
//! Each meter reads the solved voltages and net injections at its bus,
//! converted to instrument units, and optionally perturbed with Gaussian
//! noise scaled to the meter class (one standard deviation is a third of
//! the class tolerance of each reading). Noise is drawn from a counter-mode
//! generator, so a given seed and meter order always reproduces the same
//! bytes.

use chrono::{DateTime, Utc};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tolerance::{
    current_tolerance_a, power_tolerance_w, reactive_tolerance_var, sigma_from_tolerance,
    voltage_tolerance_v,
};
use super::{Channel, MeasurementRow, MeasurementSeries, MeterSpec, TelemetryError};
use crate::netmodel::NetworkModel;
use crate::powerflow::PowerFlowSolution;

/// Which channel set the synthetic meters report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthChannels {
    /// Line voltages, phase currents, signed totals: the raw CSV layout.
    Raw,
    /// Raw channels plus per-phase voltages and powers. Totals are the sums
    /// of the noisy per-phase powers, so each row stays self-consistent.
    PerPhase,
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub seed: u64,
    /// Multiplier on the class-consistent noise. Zero gives exact readings.
    pub noise_scale: f64,
    pub channels: SynthChannels,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            seed: 0,
            noise_scale: 1.0,
            channels: SynthChannels::Raw,
        }
    }
}

/// Generate one row per meter from a solved state.
///
/// Voltages and currents are reported as magnitudes in volts and amps;
/// powers are signed watts and vars with injection into the network
/// positive, so a purely consuming bus shows negative totals.
pub fn synthesize_measurements(
    model: &NetworkModel,
    solution: &PowerFlowSolution,
    meters: &[MeterSpec],
    timestamp: DateTime<Utc>,
    options: &SynthOptions,
) -> Result<MeasurementSeries, TelemetryError> {
    let injections = solution
        .state
        .nodal_injections_pu(model)
        .map_err(|e| TelemetryError::Spec(format!("state does not match the model: {e}")))?;
    let s_base_1ph = model.power_base_1ph();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut rows = Vec::with_capacity(meters.len());

    for spec in meters {
        spec.validate()?;
        let bus_idx = model.bus_idx(&spec.bus).ok_or_else(|| TelemetryError::UnknownBus {
            meter: spec.meter_id.clone(),
            bus: spec.bus.clone(),
        })?;
        if model.buses[bus_idx].phases.len() != 3 {
            return Err(TelemetryError::PartialPhases {
                meter: spec.meter_id.clone(),
                bus: spec.bus.clone(),
            });
        }
        let v_base = model.phase_base_v(bus_idx);
        let u: Vec<Complex64> = solution
            .state
            .bus_voltages(bus_idx)
            .iter()
            .map(|u| u * v_base)
            .collect();
        let nodes = solution.state.index.bus_nodes(bus_idx);
        let s: Vec<Complex64> = nodes.iter().map(|&n| injections[n] * s_base_1ph).collect();

        let line_voltages = [
            (u[0] - u[1]).norm(),
            (u[1] - u[2]).norm(),
            (u[2] - u[0]).norm(),
        ];
        let currents = [
            s[0].norm() / u[0].norm(),
            s[1].norm() / u[1].norm(),
            s[2].norm() / u[2].norm(),
        ];

        let noisy = |truth: f64, tolerance: f64, rng: &mut ChaCha8Rng| {
            let draw: f64 = rng.sample(StandardNormal);
            truth + draw * options.noise_scale * sigma_from_tolerance(tolerance)
        };

        let mut row = MeasurementRow::new(timestamp, &spec.meter_id);
        let line_channels = [Channel::VoltageAb, Channel::VoltageBc, Channel::VoltageCa];
        for (channel, truth) in line_channels.into_iter().zip(line_voltages) {
            let value = noisy(truth, voltage_tolerance_v(truth, spec), &mut rng);
            row.set(channel, value.max(0.0));
        }
        let current_channels = [Channel::CurrentA, Channel::CurrentB, Channel::CurrentC];
        for (channel, truth) in current_channels.into_iter().zip(currents) {
            let value = noisy(truth, current_tolerance_a(truth, spec), &mut rng);
            row.set(channel, value.max(0.0));
        }

        match options.channels {
            SynthChannels::Raw => {
                let p_tot: f64 = s.iter().map(|s| s.re).sum();
                let q_tot: f64 = s.iter().map(|s| s.im).sum();
                let p_sigma_sq: f64 = currents
                    .iter()
                    .map(|i| sigma_from_tolerance(power_tolerance_w(*i, spec)).powi(2))
                    .sum();
                let q_sigma_sq: f64 = currents
                    .iter()
                    .map(|i| sigma_from_tolerance(reactive_tolerance_var(*i, spec)).powi(2))
                    .sum();
                let p_draw: f64 = rng.sample(StandardNormal);
                let q_draw: f64 = rng.sample(StandardNormal);
                row.set(
                    Channel::ActiveTotal,
                    p_tot + p_draw * options.noise_scale * p_sigma_sq.sqrt(),
                );
                row.set(
                    Channel::ReactiveTotal,
                    q_tot + q_draw * options.noise_scale * q_sigma_sq.sqrt(),
                );
            }
            SynthChannels::PerPhase => {
                let phase_channels = [Channel::VoltageA, Channel::VoltageB, Channel::VoltageC];
                for (channel, u) in phase_channels.into_iter().zip(&u) {
                    let truth = u.norm();
                    let value = noisy(truth, voltage_tolerance_v(truth, spec), &mut rng);
                    row.set(channel, value.max(0.0));
                }
                let p_channels = [Channel::ActiveA, Channel::ActiveB, Channel::ActiveC];
                let q_channels = [Channel::ReactiveA, Channel::ReactiveB, Channel::ReactiveC];
                let mut p_tot = 0.0;
                let mut q_tot = 0.0;
                for k in 0..3 {
                    let p = noisy(s[k].re, power_tolerance_w(currents[k], spec), &mut rng);
                    let q = noisy(s[k].im, reactive_tolerance_var(currents[k], spec), &mut rng);
                    row.set(p_channels[k], p);
                    row.set(q_channels[k], q);
                    p_tot += p;
                    q_tot += q;
                }
                row.set(Channel::ActiveTotal, p_tot);
                row.set(Channel::ReactiveTotal, q_tot);
            }
        }
        rows.push(row);
    }
    Ok(MeasurementSeries::new(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Bus, DeviceKind, LineSegment, Load, NetworkModel};
    use crate::phase::PhaseSet;
    use crate::powerflow::{solve_powerflow, InjectionSet, PowerFlowOptions, SlackSpec};
    use approx::assert_relative_eq;
    use chrono::TimeZone;
    use nalgebra::Matrix3;

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 6, 1, 12, 0, 0).unwrap()
    }

    fn model() -> NetworkModel {
        let z = Complex64::new(0.01, 0.02) * 121.0;
        NetworkModel {
            buses: vec![
                Bus {
                    id: "grid".into(),
                    base_voltage_v: 11e3,
                    phases: PhaseSet::abc(),
                    voltage_limits_pu: (0.94, 1.06),
                },
                Bus {
                    id: "site".into(),
                    base_voltage_v: 11e3,
                    phases: PhaseSet::abc(),
                    voltage_limits_pu: (0.94, 1.06),
                },
            ],
            lines: vec![LineSegment {
                id: "feeder".into(),
                from: "grid".into(),
                to: "site".into(),
                length_m: 800.0,
                series_admittance_s: Matrix3::from_diagonal_element(1.0 / z),
                shunt_from_s: Matrix3::zeros(),
                shunt_to_s: Matrix3::zeros(),
            }],
            transformers: vec![],
            loads: vec![Load {
                id: "demand".into(),
                bus: "site".into(),
                phases: PhaseSet::abc(),
                power_va: vec![Complex64::new(100e3, 50e3); 3],
                kind: DeviceKind::Fixed,
            }],
            generators: vec![],
            slack_bus: "grid".into(),
            power_base_va: 1e6,
            frequency_hz: 50.0,
        }
    }

    fn solved() -> (NetworkModel, PowerFlowSolution) {
        let m = model();
        let solution = solve_powerflow(
            &m,
            &InjectionSet::from_model(&m),
            &SlackSpec::flat(),
            &PowerFlowOptions::default(),
        )
        .unwrap();
        (m, solution)
    }

    fn meter() -> MeterSpec {
        MeterSpec::new("site_meter", "site", 11e3, 60.0)
    }

    #[test]
    fn noiseless_readings_equal_the_solved_state() {
        let (m, solution) = solved();
        let options = SynthOptions {
            noise_scale: 0.0,
            ..SynthOptions::default()
        };
        let series =
            synthesize_measurements(&m, &solution, &[meter()], ts(), &options).unwrap();
        let row = series.row(ts(), "site_meter").unwrap();

        let v_base = 11e3 / 3.0_f64.sqrt();
        let u = solution.state.bus_voltages(1);
        let expected_vab = (u[0] - u[1]).norm() * v_base;
        assert_relative_eq!(
            row.value(Channel::VoltageAb).unwrap(),
            expected_vab,
            epsilon = 1e-9
        );

        // The only device is a 300 kW + 150 kvar load, so the metered net
        // injection is its negative.
        assert_relative_eq!(
            row.value(Channel::ActiveTotal).unwrap(),
            -300e3,
            epsilon = 1.0
        );
        assert_relative_eq!(
            row.value(Channel::ReactiveTotal).unwrap(),
            -150e3,
            epsilon = 1.0
        );

        let s_phase = Complex64::new(100e3, 50e3);
        let expected_current = s_phase.norm() / (u[0].norm() * v_base);
        assert_relative_eq!(
            row.value(Channel::CurrentA).unwrap(),
            expected_current,
            epsilon = 1e-9
        );
    }

    #[test]
    fn per_phase_rows_are_self_consistent() {
        let (m, solution) = solved();
        let options = SynthOptions {
            seed: 3,
            noise_scale: 1.0,
            channels: SynthChannels::PerPhase,
        };
        let series =
            synthesize_measurements(&m, &solution, &[meter()], ts(), &options).unwrap();
        let row = series.row(ts(), "site_meter").unwrap();
        assert_eq!(row.values.len(), 17);
        let p_sum = row.value(Channel::ActiveA).unwrap()
            + row.value(Channel::ActiveB).unwrap()
            + row.value(Channel::ActiveC).unwrap();
        assert_relative_eq!(row.value(Channel::ActiveTotal).unwrap(), p_sum, epsilon = 1e-9);
        let q_sum = row.value(Channel::ReactiveA).unwrap()
            + row.value(Channel::ReactiveB).unwrap()
            + row.value(Channel::ReactiveC).unwrap();
        assert_relative_eq!(
            row.value(Channel::ReactiveTotal).unwrap(),
            q_sum,
            epsilon = 1e-9
        );
    }

    #[test]
    fn same_seed_reproduces_identical_rows() {
        let (m, solution) = solved();
        let options = SynthOptions {
            seed: 42,
            ..SynthOptions::default()
        };
        let first = synthesize_measurements(&m, &solution, &[meter()], ts(), &options).unwrap();
        let second = synthesize_measurements(&m, &solution, &[meter()], ts(), &options).unwrap();
        assert_eq!(first, second);

        let other = SynthOptions {
            seed: 43,
            ..SynthOptions::default()
        };
        let third = synthesize_measurements(&m, &solution, &[meter()], ts(), &other).unwrap();
        assert_ne!(first, third);
    }

    #[test]
    fn noise_matches_the_class_sigma() {
        let (m, solution) = solved();
        let v_base = 11e3 / 3.0_f64.sqrt();
        let u = solution.state.bus_voltages(1);
        let truth = (u[0] - u[1]).norm() * v_base;
        let sigma = sigma_from_tolerance(voltage_tolerance_v(truth, &meter()));

        let mut errors = Vec::new();
        for seed in 0..400 {
            let options = SynthOptions {
                seed,
                ..SynthOptions::default()
            };
            let series =
                synthesize_measurements(&m, &solution, &[meter()], ts(), &options).unwrap();
            let value = series
                .row(ts(), "site_meter")
                .unwrap()
                .value(Channel::VoltageAb)
                .unwrap();
            errors.push(value - truth);
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errors.len() as f64;
        let sample_sigma = var.sqrt();
        assert!(
            (sample_sigma / sigma - 1.0).abs() < 0.3,
            "sample sigma {sample_sigma} vs class sigma {sigma}"
        );
        assert!(mean.abs() < sigma);
    }

    #[test]
    fn unknown_meter_bus_is_rejected() {
        let (m, solution) = solved();
        let mut spec = meter();
        spec.bus = "nowhere".into();
        let err = synthesize_measurements(&m, &solution, &[spec], ts(), &SynthOptions::default())
            .unwrap_err();
        assert!(matches!(err, TelemetryError::UnknownBus { .. }));
    }
}
