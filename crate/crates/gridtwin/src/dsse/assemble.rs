//! From meter readings to estimator equations.
//!
//! One batch timestamp of a measurement series is translated into weighted
//! equations: every usable channel becomes a row in per-unit with its sigma
//! taken from the meter class, total powers are split over phases in
//! proportion to the measured phase currents, buses carrying neither a
//! device nor a meter contribute zero-injection rows, and the gauge pins are
//! appended. Channels the plausibility screen rejected are left out: whole
//! channels for stuck or stepped defects, single samples for gross errors.

use chrono::{DateTime, Utc};

use super::measurement::{phase_suffix, MeasurementEquation, MeasurementKind};
use super::DsseError;
use crate::netmodel::NetworkModel;
use crate::phase::Phase;
use crate::telemetry::{
    current_tolerance_a, power_tolerance_w, reactive_tolerance_var, sigma_from_tolerance,
    split_total_power, voltage_tolerance_v, Channel, MeasurementSeries, MeterSpec, QualityReport,
};

#[derive(Debug, Clone, Copy)]
pub struct AssembleOptions {
    /// Sigma for zero-injection rows and gauge pins, pu.
    pub virtual_sigma_pu: f64,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            virtual_sigma_pu: 1e-6,
        }
    }
}

/// The gauge reference rows every estimation problem carries: a rotation
/// pin and the slack zero-sequence pins (see the measurement module docs).
pub fn gauge_equations(
    model: &NetworkModel,
    options: &AssembleOptions,
) -> Vec<MeasurementEquation> {
    let index = model.node_index();
    let slack_idx = model.bus_idx(&model.slack_bus).expect("validated slack");
    let nodes = index.bus_nodes(slack_idx);
    let nodes: [usize; 3] = [nodes[0], nodes[1], nodes[2]];
    vec![
        MeasurementEquation {
            kind: MeasurementKind::AngleReference { node: nodes[0] },
            value_pu: 0.0,
            sigma_pu: options.virtual_sigma_pu,
            source: "gauge:rotation".into(),
        },
        MeasurementEquation {
            kind: MeasurementKind::ZeroSequenceRe { nodes },
            value_pu: 0.0,
            sigma_pu: options.virtual_sigma_pu,
            source: "gauge:zero_sequence_re".into(),
        },
        MeasurementEquation {
            kind: MeasurementKind::ZeroSequenceIm { nodes },
            value_pu: 0.0,
            sigma_pu: options.virtual_sigma_pu,
            source: "gauge:zero_sequence_im".into(),
        },
    ]
}

/// Build the estimation problem for one timestamp.
pub fn assemble_measurements(
    model: &NetworkModel,
    meters: &[MeterSpec],
    series: &MeasurementSeries,
    timestamp: DateTime<Utc>,
    quality: &QualityReport,
    options: &AssembleOptions,
) -> Result<Vec<MeasurementEquation>, DsseError> {
    model.validate()?;
    let index = model.node_index();
    let mut equations = Vec::new();
    let mut any_meter_row = false;

    for spec in meters {
        spec.validate()?;
        let bus_idx = model
            .bus_idx(&spec.bus)
            .ok_or_else(|| DsseError::MeterPlacement {
                meter: spec.meter_id.clone(),
                detail: format!("unknown bus {}", spec.bus),
            })?;
        if model.buses[bus_idx].phases.len() != 3 {
            return Err(DsseError::MeterPlacement {
                meter: spec.meter_id.clone(),
                detail: format!("bus {} lacks full three-phase service", spec.bus),
            });
        }
        let Some(row) = series.row(timestamp, &spec.meter_id) else {
            continue;
        };
        any_meter_row = true;

        let usable = |channel: Channel| -> Option<f64> {
            let value = row.value(channel)?;
            if quality.sample_suspect(&spec.meter_id, channel, timestamp) {
                return None;
            }
            Some(value)
        };

        let nodes = index.bus_nodes(bus_idx);
        let nodes: [usize; 3] = [nodes[0], nodes[1], nodes[2]];
        let v_base_ll = model.buses[bus_idx].base_voltage_v;
        let v_base_phase = model.phase_base_v(bus_idx);
        let s_base_1ph = model.power_base_1ph();
        let i_base = s_base_1ph / v_base_phase;

        // Line voltage magnitudes, per unit on the line-line base.
        let line_channels = [
            (Channel::VoltageAb, 0usize, 1usize, "v_ab"),
            (Channel::VoltageBc, 1, 2, "v_bc"),
            (Channel::VoltageCa, 2, 0, "v_ca"),
        ];
        for (channel, p, q, label) in line_channels {
            let Some(value) = usable(channel) else { continue };
            let sigma = sigma_from_tolerance(voltage_tolerance_v(value, spec)) / v_base_ll;
            if sigma <= 0.0 {
                continue;
            }
            equations.push(MeasurementEquation {
                kind: MeasurementKind::LineVoltageMag {
                    from_node: nodes[p],
                    to_node: nodes[q],
                },
                value_pu: value / v_base_ll,
                sigma_pu: sigma,
                source: format!("{}:{}", spec.meter_id, label),
            });
        }

        // Phase voltage magnitudes from extended meters.
        let phase_v = [
            (Channel::VoltageA, Phase::A),
            (Channel::VoltageB, Phase::B),
            (Channel::VoltageC, Phase::C),
        ];
        for (channel, phase) in phase_v {
            let Some(value) = usable(channel) else { continue };
            let sigma = sigma_from_tolerance(voltage_tolerance_v(value, spec)) / v_base_phase;
            if sigma <= 0.0 {
                continue;
            }
            equations.push(MeasurementEquation {
                kind: MeasurementKind::PhaseVoltageMag {
                    node: nodes[phase.index()],
                },
                value_pu: value / v_base_phase,
                sigma_pu: sigma,
                source: format!("{}:v_{}", spec.meter_id, phase_suffix(phase)),
            });
        }

        // Phase current magnitudes; the readings double as splitting weights
        // for the total powers below.
        let mut currents = [f64::NAN; 3];
        let phase_i = [
            (Channel::CurrentA, Phase::A),
            (Channel::CurrentB, Phase::B),
            (Channel::CurrentC, Phase::C),
        ];
        for (channel, phase) in phase_i {
            let Some(value) = usable(channel) else { continue };
            currents[phase.index()] = value;
            // Below the CT floor the accuracy class makes no promise, and a
            // magnitude this small sits on the kink of |i| at zero where the
            // residual has no usable gradient. The reading still weights the
            // total-power split but stays out of the fit.
            if value < spec.current_floor_a() {
                continue;
            }
            let sigma = sigma_from_tolerance(current_tolerance_a(value, spec)) / i_base;
            equations.push(MeasurementEquation {
                kind: MeasurementKind::CurrentMag {
                    node: nodes[phase.index()],
                },
                value_pu: value / i_base,
                sigma_pu: sigma,
                source: format!("{}:i_{}", spec.meter_id, phase_suffix(phase)),
            });
        }
        // Tolerance evaluation needs a current even when the channel is
        // unusable; the rated floor is the conservative stand-in.
        let tolerance_current =
            |k: usize| -> f64 { if currents[k].is_finite() { currents[k] } else { 0.0 } };

        // Active power: per-phase channels when present, otherwise the total
        // split in proportion to the measured currents (equal thirds when
        // the currents are unusable).
        let p_channels = [Channel::ActiveA, Channel::ActiveB, Channel::ActiveC];
        let have_per_phase_p = p_channels.iter().all(|c| usable(*c).is_some());
        let p_values: Option<[f64; 3]> = if have_per_phase_p {
            Some([
                usable(Channel::ActiveA).unwrap(),
                usable(Channel::ActiveB).unwrap(),
                usable(Channel::ActiveC).unwrap(),
            ])
        } else {
            usable(Channel::ActiveTotal).map(|total| split_total_power(total, currents))
        };
        if let Some(values) = p_values {
            for (k, phase) in Phase::ALL.into_iter().enumerate() {
                let sigma =
                    sigma_from_tolerance(power_tolerance_w(tolerance_current(k), spec))
                        / s_base_1ph;
                equations.push(MeasurementEquation {
                    kind: MeasurementKind::ActiveInjection {
                        node: nodes[phase.index()],
                    },
                    value_pu: values[k] / s_base_1ph,
                    sigma_pu: sigma,
                    source: format!("{}:p_{}", spec.meter_id, phase_suffix(phase)),
                });
            }
        }

        let q_channels = [Channel::ReactiveA, Channel::ReactiveB, Channel::ReactiveC];
        let have_per_phase_q = q_channels.iter().all(|c| usable(*c).is_some());
        let q_values: Option<[f64; 3]> = if have_per_phase_q {
            Some([
                usable(Channel::ReactiveA).unwrap(),
                usable(Channel::ReactiveB).unwrap(),
                usable(Channel::ReactiveC).unwrap(),
            ])
        } else {
            usable(Channel::ReactiveTotal).map(|total| split_total_power(total, currents))
        };
        if let Some(values) = q_values {
            for (k, phase) in Phase::ALL.into_iter().enumerate() {
                let sigma =
                    sigma_from_tolerance(reactive_tolerance_var(tolerance_current(k), spec))
                        / s_base_1ph;
                equations.push(MeasurementEquation {
                    kind: MeasurementKind::ReactiveInjection {
                        node: nodes[phase.index()],
                    },
                    value_pu: values[k] / s_base_1ph,
                    sigma_pu: sigma,
                    source: format!("{}:q_{}", spec.meter_id, phase_suffix(phase)),
                });
            }
        }
    }

    if !any_meter_row {
        return Err(DsseError::NoMeterData { timestamp });
    }

    // Buses with neither a device nor a meter inject nothing by topology.
    for (bus_idx, bus) in model.buses.iter().enumerate() {
        if bus.id == model.slack_bus {
            continue;
        }
        let has_device = model.loads.iter().any(|l| l.bus == bus.id)
            || model.generators.iter().any(|g| g.bus == bus.id);
        let has_meter = meters.iter().any(|m| m.bus == bus.id);
        if has_device || has_meter {
            continue;
        }
        for &node in index.bus_nodes(bus_idx).iter() {
            let (_, phase) = index.node(node);
            equations.push(MeasurementEquation {
                kind: MeasurementKind::ActiveInjection { node },
                value_pu: 0.0,
                sigma_pu: options.virtual_sigma_pu,
                source: format!("zero_injection:{}:p_{}", bus.id, phase_suffix(phase)),
            });
            equations.push(MeasurementEquation {
                kind: MeasurementKind::ReactiveInjection { node },
                value_pu: 0.0,
                sigma_pu: options.virtual_sigma_pu,
                source: format!("zero_injection:{}:q_{}", bus.id, phase_suffix(phase)),
            });
        }
    }

    equations.extend(gauge_equations(model, options));
    Ok(equations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Bus, DeviceKind, LineSegment, Load, NetworkModel};
    use crate::phase::PhaseSet;
    use crate::powerflow::{
        solve_powerflow, InjectionSet, PowerFlowOptions, PowerFlowSolution, SlackSpec,
    };
    use crate::telemetry::{
        synthesize_measurements, QualityFinding, QualityKind, SynthOptions,
    };
    use chrono::TimeZone;
    use nalgebra::Matrix3;
    use num_complex::Complex64;

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 6, 1, 12, 0, 0).unwrap()
    }

    fn bus(id: &str) -> Bus {
        Bus {
            id: id.into(),
            base_voltage_v: 11e3,
            phases: PhaseSet::abc(),
            voltage_limits_pu: (0.94, 1.06),
        }
    }

    fn line(id: &str, from: &str, to: &str) -> LineSegment {
        let z = Complex64::new(0.01, 0.02) * 121.0;
        LineSegment {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            length_m: 600.0,
            series_admittance_s: Matrix3::from_diagonal_element(1.0 / z),
            shunt_from_s: Matrix3::zeros(),
            shunt_to_s: Matrix3::zeros(),
        }
    }

    /// grid - junction - site: the junction carries nothing and nobody
    /// meters it, so it must show up as zero-injection rows.
    fn model() -> NetworkModel {
        NetworkModel {
            buses: vec![bus("grid"), bus("junction"), bus("site")],
            lines: vec![
                line("l1", "grid", "junction"),
                line("l2", "junction", "site"),
            ],
            transformers: vec![],
            loads: vec![Load {
                id: "demand".into(),
                bus: "site".into(),
                phases: PhaseSet::abc(),
                power_va: vec![
                    Complex64::new(90e3, 40e3),
                    Complex64::new(110e3, 45e3),
                    Complex64::new(70e3, 30e3),
                ],
                kind: DeviceKind::Fixed,
            }],
            generators: vec![],
            slack_bus: "grid".into(),
            power_base_va: 1e6,
            frequency_hz: 50.0,
        }
    }

    fn meters() -> Vec<MeterSpec> {
        vec![
            MeterSpec::new("pcc", "grid", 11e3, 100.0),
            MeterSpec::new("site_m", "site", 11e3, 60.0),
        ]
    }

    fn truth(model: &NetworkModel) -> PowerFlowSolution {
        solve_powerflow(
            model,
            &InjectionSet::from_model(model),
            &SlackSpec::flat(),
            &PowerFlowOptions::default(),
        )
        .unwrap()
    }

    fn noiseless_series(model: &NetworkModel, solution: &PowerFlowSolution) -> MeasurementSeries {
        synthesize_measurements(
            model,
            solution,
            &meters(),
            ts(),
            &SynthOptions {
                noise_scale: 0.0,
                ..SynthOptions::default()
            },
        )
        .unwrap()
    }

    fn estimate_from(m: &NetworkModel, series: &MeasurementSeries) -> crate::dsse::StateEstimate {
        let equations = assemble_measurements(
            m,
            &meters(),
            series,
            ts(),
            &QualityReport::default(),
            &AssembleOptions::default(),
        )
        .unwrap();
        crate::dsse::estimate_state(m, &equations, &crate::dsse::EstimatorOptions::default())
            .unwrap()
    }

    fn worst_state_error(estimate: &crate::dsse::StateEstimate, truth: &PowerFlowSolution) -> f64 {
        estimate
            .state
            .voltages_pu
            .iter()
            .zip(truth.state.voltages_pu.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn noiseless_per_phase_round_trip_recovers_the_state() {
        let m = model();
        let solution = truth(&m);
        let series = synthesize_measurements(
            &m,
            &solution,
            &meters(),
            ts(),
            &SynthOptions {
                noise_scale: 0.0,
                channels: crate::telemetry::SynthChannels::PerPhase,
                ..SynthOptions::default()
            },
        )
        .unwrap();
        let estimate = estimate_from(&m, &series);
        let err = worst_state_error(&estimate, &solution);
        assert!(err < 1e-6, "worst state error {err}");
        assert!(estimate.objective < 1e-10, "objective {}", estimate.objective);
    }

    #[test]
    fn raw_channel_round_trip_stays_within_the_split_model_error() {
        // Raw meters report only total powers. Splitting them over phases in
        // proportion to current magnitudes is slightly off on unbalanced
        // load, so the recovered state carries a small method error even
        // with noiseless readings.
        let m = model();
        let solution = truth(&m);
        let series = noiseless_series(&m, &solution);
        let estimate = estimate_from(&m, &series);
        let err = worst_state_error(&estimate, &solution);
        assert!(err < 2e-3, "worst state error {err}");
        assert!(err > 1e-8, "raw split should not be exact on unbalanced load");
    }

    #[test]
    fn junction_gets_zero_injection_rows_and_gauge_pins_are_present() {
        let m = model();
        let solution = truth(&m);
        let series = noiseless_series(&m, &solution);
        let equations = assemble_measurements(
            &m,
            &meters(),
            &series,
            ts(),
            &QualityReport::default(),
            &AssembleOptions::default(),
        )
        .unwrap();
        let zero_rows: Vec<&MeasurementEquation> = equations
            .iter()
            .filter(|e| e.source.starts_with("zero_injection:junction"))
            .collect();
        assert_eq!(zero_rows.len(), 6);
        assert!(zero_rows.iter().all(|e| e.sigma_pu == 1e-6 && e.value_pu == 0.0));
        assert_eq!(
            equations
                .iter()
                .filter(|e| e.source.starts_with("gauge:"))
                .count(),
            3
        );
        // Raw meters have no per-phase voltage channels.
        assert!(equations
            .iter()
            .all(|e| !matches!(e.kind, MeasurementKind::PhaseVoltageMag { .. })));
    }

    #[test]
    fn suspect_channels_are_left_out() {
        let m = model();
        let solution = truth(&m);
        let series = noiseless_series(&m, &solution);
        let quality = QualityReport {
            findings: vec![QualityFinding {
                meter_id: "site_m".into(),
                channel: Channel::VoltageAb,
                kind: QualityKind::Stuck,
                timestamps: vec![ts()],
                detail: "held".into(),
            }],
        };
        let equations = assemble_measurements(
            &m,
            &meters(),
            &series,
            ts(),
            &quality,
            &AssembleOptions::default(),
        )
        .unwrap();
        assert!(!equations.iter().any(|e| e.source == "site_m:v_ab"));
        assert!(equations.iter().any(|e| e.source == "site_m:v_bc"));
        assert!(equations.iter().any(|e| e.source == "pcc:v_ab"));
    }

    #[test]
    fn totals_split_by_current_and_fall_back_to_equal_thirds() {
        let m = model();
        let solution = truth(&m);
        let series = noiseless_series(&m, &solution);
        let equations = assemble_measurements(
            &m,
            &meters(),
            &series,
            ts(),
            &QualityReport::default(),
            &AssembleOptions::default(),
        )
        .unwrap();
        // Unequal phase loads mean unequal currents, so the split must not
        // be uniform, yet it must conserve the measured total.
        let p: Vec<f64> = ["a", "b", "c"]
            .iter()
            .map(|s| {
                equations
                    .iter()
                    .find(|e| e.source == format!("site_m:p_{s}"))
                    .unwrap()
                    .value_pu
            })
            .collect();
        assert!((p[0] - p[1]).abs() > 1e-4);
        let total: f64 = p.iter().sum();
        assert!((total * m.power_base_1ph() + 270e3).abs() < 1.0);

        // Remove the currents: the split degrades to equal thirds.
        let mut stripped_rows = Vec::new();
        for row in series.rows() {
            let mut row = row.clone();
            row.values.remove(&Channel::CurrentA);
            row.values.remove(&Channel::CurrentB);
            row.values.remove(&Channel::CurrentC);
            stripped_rows.push(row);
        }
        let stripped = MeasurementSeries::new(stripped_rows);
        let equations = assemble_measurements(
            &m,
            &meters(),
            &stripped,
            ts(),
            &QualityReport::default(),
            &AssembleOptions::default(),
        )
        .unwrap();
        let p: Vec<f64> = ["a", "b", "c"]
            .iter()
            .map(|s| {
                equations
                    .iter()
                    .find(|e| e.source == format!("site_m:p_{s}"))
                    .unwrap()
                    .value_pu
            })
            .collect();
        assert!((p[0] - p[1]).abs() < 1e-12);
        assert!((p[1] - p[2]).abs() < 1e-12);
    }

    #[test]
    fn missing_batch_is_an_error() {
        let m = model();
        let solution = truth(&m);
        let series = noiseless_series(&m, &solution);
        let later = ts() + chrono::Duration::minutes(30);
        let err = assemble_measurements(
            &m,
            &meters(),
            &series,
            later,
            &QualityReport::default(),
            &AssembleOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DsseError::NoMeterData { .. }));
    }
}
