//! Recovering an unknown tap position by replaying measurements.
//!
//! Off-load tap changers are set by field crews and the recorded position is
//! sometimes wrong. The sweep tries every declared position, replays the
//! measured operating points through the power flow with that position, and
//! scores each candidate by the RMS gap between simulated and measured line
//! voltages. The recorded-versus-best comparison then flags a likely
//! misdocumented tap.

use chrono::{DateTime, Utc};

use super::inputs::measured_powerflow_inputs;
use super::DsseError;
use crate::netmodel::NetworkModel;
use crate::powerflow::{solve_powerflow, PowerFlowOptions};
use crate::telemetry::{Channel, MeasurementSeries, MeterSpec, QualityReport};

#[derive(Debug, Clone)]
pub struct TapSweepResult {
    pub transformer_id: String,
    /// RMS line-voltage error in per unit for every candidate position,
    /// in ascending position order. Positions where the power flow failed
    /// to converge carry an infinite error.
    pub rms_by_position: Vec<(i32, f64)>,
    pub best_position: i32,
    pub best_rms_pu: f64,
    /// Number of (meter, channel, timestamp) comparisons behind each RMS.
    pub samples: usize,
}

impl TapSweepResult {
    /// RMS error of one candidate position, if it was swept.
    pub fn rms_at(&self, position: i32) -> Option<f64> {
        self.rms_by_position
            .iter()
            .find(|(p, _)| *p == position)
            .map(|(_, rms)| *rms)
    }
}

/// Sweep every declared tap position of one transformer against measured
/// line voltages at the given timestamps.
///
/// The slack meter seeds the feeder-head voltage and is excluded from the
/// score, since the replay matches it by construction. Every other meter
/// contributes its usable line-voltage channels.
pub fn sweep_tap_positions(
    model: &NetworkModel,
    transformer_id: &str,
    meters: &[MeterSpec],
    series: &MeasurementSeries,
    timestamps: &[DateTime<Utc>],
    quality: &QualityReport,
) -> Result<TapSweepResult, DsseError> {
    model.validate()?;
    let tx_idx = model
        .transformers
        .iter()
        .position(|t| t.id == transformer_id)
        .ok_or_else(|| DsseError::UnknownTransformer {
            id: transformer_id.to_string(),
        })?;
    let (lo, hi) = model.transformers[tx_idx].tap.range;

    // The measured operating points are independent of the candidate tap.
    let mut operating_points = Vec::new();
    for &ts in timestamps {
        operating_points.push((ts, measured_powerflow_inputs(model, meters, series, ts, quality)?));
    }

    let index = model.node_index();
    let line_channels = [
        (Channel::VoltageAb, 0usize, 1usize),
        (Channel::VoltageBc, 1, 2),
        (Channel::VoltageCa, 2, 0),
    ];

    let mut rms_by_position = Vec::new();
    let mut samples = 0usize;
    let mut first_failure: Option<DsseError> = None;
    for position in lo..=hi {
        let mut candidate = model.clone();
        candidate.transformers[tx_idx].tap.position = position;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        let mut failed = false;
        for (ts, (slack, injections)) in &operating_points {
            let solution =
                match solve_powerflow(&candidate, injections, slack, &PowerFlowOptions::default())
                {
                    Ok(s) => s,
                    Err(err) => {
                        if first_failure.is_none() {
                            first_failure = Some(err.into());
                        }
                        failed = true;
                        break;
                    }
                };
            for spec in meters {
                if spec.bus == model.slack_bus {
                    continue;
                }
                let Some(row) = series.row(*ts, &spec.meter_id) else {
                    continue;
                };
                let bus_idx = model.bus_idx(&spec.bus).expect("validated meter bus");
                let nodes = index.bus_nodes(bus_idx);
                let u = &solution.state.voltages_pu;
                let v_base_ll = candidate.buses[bus_idx].base_voltage_v;
                for (channel, p, q) in line_channels {
                    let Some(value) = row.value(channel) else { continue };
                    if quality.sample_suspect(&spec.meter_id, channel, *ts) {
                        continue;
                    }
                    let simulated = (u[nodes[p]] - u[nodes[q]]).norm() / 3f64.sqrt();
                    let measured = value / v_base_ll;
                    sum_sq += (simulated - measured).powi(2);
                    count += 1;
                }
            }
        }
        let rms = if failed || count == 0 {
            f64::INFINITY
        } else {
            samples = count;
            (sum_sq / count as f64).sqrt()
        };
        rms_by_position.push((position, rms));
    }

    let best = rms_by_position
        .iter()
        .copied()
        .filter(|(_, rms)| rms.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((best_position, best_rms_pu)) = best else {
        return Err(first_failure.unwrap_or(DsseError::NoSweepReadings));
    };
    if samples == 0 {
        return Err(DsseError::NoSweepReadings);
    }

    Ok(TapSweepResult {
        transformer_id: transformer_id.to_string(),
        rms_by_position,
        best_position,
        best_rms_pu,
        samples,
    })
}

/// One transformer's tap before and after correction.
#[derive(Debug, Clone)]
pub struct TapCorrection {
    pub transformer_id: String,
    pub recorded_position: i32,
    pub corrected_position: i32,
}

#[derive(Debug, Clone)]
pub struct TapCorrectionReport {
    /// RMS line-voltage error of the model as recorded, pu.
    pub before_rms_pu: f64,
    /// RMS error after the corrected positions are applied, pu.
    pub after_rms_pu: f64,
    pub corrections: Vec<TapCorrection>,
    /// Full coordinate-descent passes performed, including the final pass
    /// that found nothing left to improve.
    pub passes: usize,
}

const MAX_CORRECTION_PASSES: usize = 16;

/// Correct the tap positions of several transformers by coordinate descent.
///
/// Each pass sweeps the named transformers one at a time with the others
/// held at their current positions, keeping any strictly better best
/// position. Passes repeat until one changes nothing. Every move lowers the
/// replay RMS, so the walk terminates; the pass cap is pure insurance.
/// `transformer_ids` of `None` corrects every transformer in the model.
pub fn correct_taps(
    model: &NetworkModel,
    transformer_ids: Option<&[String]>,
    meters: &[MeterSpec],
    series: &MeasurementSeries,
    timestamps: &[DateTime<Utc>],
    quality: &QualityReport,
) -> Result<(NetworkModel, TapCorrectionReport), DsseError> {
    model.validate()?;
    let ids: Vec<String> = match transformer_ids {
        Some(ids) => ids.to_vec(),
        None => model.transformers.iter().map(|t| t.id.clone()).collect(),
    };
    for id in &ids {
        if !model.transformers.iter().any(|t| t.id == *id) {
            return Err(DsseError::UnknownTransformer { id: id.clone() });
        }
    }
    if ids.is_empty() {
        return Err(DsseError::NoSweepReadings);
    }

    let mut current = model.clone();
    let mut before_rms = f64::NAN;
    let mut after_rms = f64::NAN;
    let mut passes = 0;
    while passes < MAX_CORRECTION_PASSES {
        passes += 1;
        let mut changed = false;
        for id in &ids {
            let sweep =
                sweep_tap_positions(&current, id, meters, series, timestamps, quality)?;
            let tx = current
                .transformers
                .iter_mut()
                .find(|t| t.id == *id)
                .expect("id checked above");
            let here = sweep
                .rms_at(tx.tap.position)
                .expect("current position lies in the swept range");
            if passes == 1 && before_rms.is_nan() {
                before_rms = here;
            }
            if sweep.best_position != tx.tap.position && sweep.best_rms_pu < here {
                tx.tap.position = sweep.best_position;
                changed = true;
            }
            after_rms = sweep.best_rms_pu.min(here);
        }
        if !changed {
            break;
        }
    }

    let corrections = ids
        .iter()
        .map(|id| {
            let find = |m: &NetworkModel| {
                m.transformers
                    .iter()
                    .find(|t| t.id == *id)
                    .expect("id checked above")
                    .tap
                    .position
            };
            TapCorrection {
                transformer_id: id.clone(),
                recorded_position: find(model),
                corrected_position: find(&current),
            }
        })
        .collect();

    Ok((
        current,
        TapCorrectionReport {
            before_rms_pu: before_rms,
            after_rms_pu: after_rms,
            corrections,
            passes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{
        Bus, DeviceKind, LineSegment, Load, NetworkModel, TapChanger, Transformer,
        WindingConnection,
    };
    use crate::phase::PhaseSet;
    use crate::powerflow::{InjectionSet, SlackSpec};
    use crate::telemetry::{synthesize_measurements, SynthOptions};
    use chrono::TimeZone;
    use nalgebra::Matrix3;
    use num_complex::Complex64;

    fn ts(minute: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 6, 1, 12, minute, 0).unwrap()
    }

    fn bus(id: &str, kv: f64) -> Bus {
        Bus {
            id: id.into(),
            base_voltage_v: kv * 1e3,
            phases: PhaseSet::abc(),
            voltage_limits_pu: (0.94, 1.06),
        }
    }

    /// grid --line-- mv --tx(Dyn)-- lv with a LV load; meters at the grid
    /// head and on the LV busbar.
    fn model_with_tap(position: i32) -> NetworkModel {
        let z = Complex64::new(0.006, 0.012) * 121.0;
        NetworkModel {
            buses: vec![bus("grid", 11.0), bus("mv", 11.0), bus("lv", 0.433)],
            lines: vec![LineSegment {
                id: "feeder".into(),
                from: "grid".into(),
                to: "mv".into(),
                length_m: 400.0,
                series_admittance_s: Matrix3::from_diagonal_element(1.0 / z),
                shunt_from_s: Matrix3::zeros(),
                shunt_to_s: Matrix3::zeros(),
            }],
            transformers: vec![Transformer {
                id: "tx1".into(),
                from: "mv".into(),
                to: "lv".into(),
                rated_va: 500e3,
                series_impedance_pu: Complex64::new(0.01, 0.05),
                connection: (WindingConnection::Delta, WindingConnection::WyeGrounded),
                winding1_voltage_v: 11e3,
                nominal_ratio: 11e3 / 433.0,
                tap: TapChanger {
                    step_pct: 1.25,
                    position,
                    range: (-6, 6),
                },
            }],
            loads: vec![Load {
                id: "street".into(),
                bus: "lv".into(),
                phases: PhaseSet::abc(),
                power_va: vec![
                    Complex64::new(60e3, 20e3),
                    Complex64::new(75e3, 25e3),
                    Complex64::new(50e3, 15e3),
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
            MeterSpec::new("pcc", "grid", 11e3, 60.0),
            MeterSpec::new("lv_board", "lv", 433.0, 800.0),
        ]
    }

    fn measurements_from(true_position: i32, stamps: &[DateTime<Utc>]) -> MeasurementSeries {
        let truth_model = model_with_tap(true_position);
        let mut rows = Vec::new();
        for (k, &stamp) in stamps.iter().enumerate() {
            // Different demand levels per timestamp keep the sweep honest.
            let scale = 1.0 - 0.25 * k as f64;
            let mut injections = InjectionSet::from_model(&truth_model);
            let street = injections
                .injection_va("street")
                .unwrap()
                .iter()
                .map(|s| s * scale)
                .collect();
            injections.set_injection_va("street", street);
            let solution = solve_powerflow(
                &truth_model,
                &injections,
                &SlackSpec::balanced(1.01),
                &PowerFlowOptions::default(),
            )
            .unwrap();
            let series = synthesize_measurements(
                &truth_model,
                &solution,
                &meters(),
                stamp,
                &SynthOptions {
                    noise_scale: 0.0,
                    ..SynthOptions::default()
                },
            )
            .unwrap();
            rows.extend(series.rows().iter().cloned());
        }
        MeasurementSeries::new(rows)
    }

    /// Two LV substations on separate MV feeders from the same head.
    fn two_feeder_model(position_a: i32, position_b: i32) -> NetworkModel {
        let z = Complex64::new(0.006, 0.012) * 121.0;
        let feeder = |id: &str, from: &str, to: &str| LineSegment {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            length_m: 400.0,
            series_admittance_s: Matrix3::from_diagonal_element(1.0 / z),
            shunt_from_s: Matrix3::zeros(),
            shunt_to_s: Matrix3::zeros(),
        };
        let tx = |id: &str, from: &str, to: &str, position: i32| Transformer {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            rated_va: 500e3,
            series_impedance_pu: Complex64::new(0.01, 0.05),
            connection: (WindingConnection::Delta, WindingConnection::WyeGrounded),
            winding1_voltage_v: 11e3,
            nominal_ratio: 11e3 / 433.0,
            tap: TapChanger {
                step_pct: 1.25,
                position,
                range: (-6, 6),
            },
        };
        let street = |id: &str, bus: &str| Load {
            id: id.into(),
            bus: bus.into(),
            phases: PhaseSet::abc(),
            power_va: vec![
                Complex64::new(60e3, 20e3),
                Complex64::new(75e3, 25e3),
                Complex64::new(50e3, 15e3),
            ],
            kind: DeviceKind::Fixed,
        };
        NetworkModel {
            buses: vec![
                bus("grid", 11.0),
                bus("mv_a", 11.0),
                bus("lv_a", 0.433),
                bus("mv_b", 11.0),
                bus("lv_b", 0.433),
            ],
            lines: vec![
                feeder("feeder_a", "grid", "mv_a"),
                feeder("feeder_b", "grid", "mv_b"),
            ],
            transformers: vec![
                tx("tx_a", "mv_a", "lv_a", position_a),
                tx("tx_b", "mv_b", "lv_b", position_b),
            ],
            loads: vec![street("street_a", "lv_a"), street("street_b", "lv_b")],
            generators: vec![],
            slack_bus: "grid".into(),
            power_base_va: 1e6,
            frequency_hz: 50.0,
        }
    }

    fn two_feeder_meters() -> Vec<MeterSpec> {
        vec![
            MeterSpec::new("pcc", "grid", 11e3, 60.0),
            MeterSpec::new("board_a", "lv_a", 433.0, 800.0),
            MeterSpec::new("board_b", "lv_b", 433.0, 800.0),
        ]
    }

    fn two_feeder_measurements(
        position_a: i32,
        position_b: i32,
        stamps: &[DateTime<Utc>],
    ) -> MeasurementSeries {
        let truth_model = two_feeder_model(position_a, position_b);
        let mut rows = Vec::new();
        for (k, &stamp) in stamps.iter().enumerate() {
            let scale = 1.0 - 0.25 * k as f64;
            let mut injections = InjectionSet::from_model(&truth_model);
            for id in ["street_a", "street_b"] {
                let scaled = injections
                    .injection_va(id)
                    .unwrap()
                    .iter()
                    .map(|s| s * scale)
                    .collect();
                injections.set_injection_va(id, scaled);
            }
            let solution = solve_powerflow(
                &truth_model,
                &injections,
                &SlackSpec::balanced(1.01),
                &PowerFlowOptions::default(),
            )
            .unwrap();
            let series = synthesize_measurements(
                &truth_model,
                &solution,
                &two_feeder_meters(),
                stamp,
                &SynthOptions {
                    noise_scale: 0.0,
                    ..SynthOptions::default()
                },
            )
            .unwrap();
            rows.extend(series.rows().iter().cloned());
        }
        MeasurementSeries::new(rows)
    }

    #[test]
    fn true_taps_are_a_fixed_point_of_the_correction() {
        let stamps = [ts(0), ts(30)];
        let series = two_feeder_measurements(2, -3, &stamps);
        let model = two_feeder_model(2, -3);
        let (corrected, report) = correct_taps(
            &model,
            None,
            &two_feeder_meters(),
            &series,
            &stamps,
            &QualityReport::default(),
        )
        .unwrap();
        assert_eq!(report.passes, 1);
        assert_eq!(corrected.transformers[0].tap.position, 2);
        assert_eq!(corrected.transformers[1].tap.position, -3);
        assert!(report.after_rms_pu <= report.before_rms_pu);
    }

    #[test]
    fn two_offset_transformers_are_recovered_independently() {
        let stamps = [ts(0), ts(30)];
        let series = two_feeder_measurements(2, -3, &stamps);
        // Both substations still record the nominal position.
        let recorded = two_feeder_model(0, 0);
        let (corrected, report) = correct_taps(
            &recorded,
            None,
            &two_feeder_meters(),
            &series,
            &stamps,
            &QualityReport::default(),
        )
        .unwrap();
        let by_id: Vec<(String, i32)> = report
            .corrections
            .iter()
            .map(|c| (c.transformer_id.clone(), c.corrected_position))
            .collect();
        assert_eq!(by_id, vec![("tx_a".into(), 2), ("tx_b".into(), -3)]);
        assert_eq!(corrected.transformers[0].tap.position, 2);
        assert_eq!(corrected.transformers[1].tap.position, -3);
        assert!(
            report.after_rms_pu * 5.0 < report.before_rms_pu,
            "before {} after {}",
            report.before_rms_pu,
            report.after_rms_pu
        );
        // The original stays untouched.
        assert_eq!(recorded.transformers[0].tap.position, 0);
    }

    #[test]
    fn correcting_an_unknown_transformer_is_an_error() {
        let stamps = [ts(0)];
        let series = two_feeder_measurements(0, 0, &stamps);
        let model = two_feeder_model(0, 0);
        let err = correct_taps(
            &model,
            Some(&["nope".to_string()]),
            &two_feeder_meters(),
            &series,
            &stamps,
            &QualityReport::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DsseError::UnknownTransformer { .. }));
    }

    #[test]
    fn sweep_recovers_a_misdocumented_position() {
        let stamps = [ts(0), ts(30)];
        let series = measurements_from(3, &stamps);
        // The model under test still records the nominal position.
        let recorded = model_with_tap(0);
        let result = sweep_tap_positions(
            &recorded,
            "tx1",
            &meters(),
            &series,
            &stamps,
            &QualityReport::default(),
        )
        .unwrap();
        assert_eq!(result.best_position, 3);
        assert_eq!(result.rms_by_position.len(), 13);
        let recorded_rms = result.rms_at(0).unwrap();
        assert!(
            recorded_rms > 5.0 * result.best_rms_pu,
            "recorded {recorded_rms:.3e} vs best {:.3e}",
            result.best_rms_pu
        );
        // One tap step moves the LV voltage by 1.25%, far above the noise
        // floor here, so neighbours must also score worse.
        assert!(result.rms_at(2).unwrap() > result.best_rms_pu);
        assert!(result.rms_at(4).unwrap() > result.best_rms_pu);
        assert_eq!(result.samples, 2 * 3);
    }

    #[test]
    fn unknown_transformer_is_reported() {
        let stamps = [ts(0)];
        let series = measurements_from(0, &stamps);
        let err = sweep_tap_positions(
            &model_with_tap(0),
            "no_such_tx",
            &meters(),
            &series,
            &stamps,
            &QualityReport::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DsseError::UnknownTransformer { .. }));
    }
}
