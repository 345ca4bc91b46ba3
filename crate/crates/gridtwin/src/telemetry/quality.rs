//! Measurement plausibility screening.
//!
//! Four defect classes are detected per meter channel, each judged against
//! the meter's own sibling channels so that a quiet network does not trigger
//! false alarms:
//!
//! * stuck: the value repeats exactly for many consecutive samples while
//!   sibling channels keep moving,
//! * stepped: the value only moves in coarse relative jumps between long
//!   plateaus, a signature of report-by-exception logging,
//! * gross error: an isolated sample far outside a robust local spread,
//! * missing: gaps in a channel the meter otherwise reports.
//!
//! Stuck and stepped disqualify the whole channel; gross errors disqualify
//! individual samples; missing is informational.

use chrono::{DateTime, Utc};

use super::{Channel, MeasurementSeries};

#[derive(Debug, Clone)]
pub struct QualityOptions {
    /// Minimum run of identical samples to call a channel stuck.
    pub stuck_min_len: usize,
    /// Minimum relative jump between plateaus of a stepped channel.
    pub step_rel_threshold: f64,
    /// Robust z-score above which a sample is a gross error.
    pub gross_z_threshold: f64,
    /// Sliding window width (samples) for the gross error statistics.
    pub gross_window: usize,
}

impl Default for QualityOptions {
    fn default() -> Self {
        QualityOptions {
            stuck_min_len: 20,
            step_rel_threshold: 0.01,
            gross_z_threshold: 8.0,
            gross_window: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualityKind {
    Stuck,
    Stepped,
    GrossError,
    Missing,
}

impl QualityKind {
    pub fn label(self) -> &'static str {
        match self {
            QualityKind::Stuck => "stuck",
            QualityKind::Stepped => "stepped",
            QualityKind::GrossError => "gross_error",
            QualityKind::Missing => "missing",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QualityFinding {
    pub meter_id: String,
    pub channel: Channel,
    pub kind: QualityKind,
    /// Samples implicated by this finding.
    pub timestamps: Vec<DateTime<Utc>>,
    pub detail: String,
}

impl QualityFinding {
    pub fn count(&self) -> usize {
        self.timestamps.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct QualityReport {
    pub findings: Vec<QualityFinding>,
}

impl QualityReport {
    /// True when the whole channel is untrustworthy (stuck or stepped).
    pub fn channel_unusable(&self, meter_id: &str, channel: Channel) -> bool {
        self.findings.iter().any(|f| {
            f.meter_id == meter_id
                && f.channel == channel
                && matches!(f.kind, QualityKind::Stuck | QualityKind::Stepped)
        })
    }

    /// True when a specific sample should be discarded: the channel is
    /// unusable outright, or this timestamp carries a gross error.
    pub fn sample_suspect(
        &self,
        meter_id: &str,
        channel: Channel,
        timestamp: DateTime<Utc>,
    ) -> bool {
        self.findings.iter().any(|f| {
            f.meter_id == meter_id
                && f.channel == channel
                && match f.kind {
                    QualityKind::Stuck | QualityKind::Stepped => true,
                    QualityKind::GrossError => f.timestamps.contains(&timestamp),
                    QualityKind::Missing => false,
                }
        })
    }

    pub fn count(&self, kind: QualityKind) -> usize {
        self.findings.iter().filter(|f| f.kind == kind).count()
    }
}

struct MeterTable {
    timestamps: Vec<DateTime<Utc>>,
    channels: Vec<Channel>,
    /// One column per channel, aligned with `timestamps`.
    values: Vec<Vec<Option<f64>>>,
}

fn meter_table(series: &MeasurementSeries, meter_id: &str) -> MeterTable {
    let channels = series.channels_of(meter_id);
    let mut timestamps = Vec::new();
    let mut values: Vec<Vec<Option<f64>>> = vec![Vec::new(); channels.len()];
    for row in series.rows().iter().filter(|r| r.meter_id == meter_id) {
        timestamps.push(row.timestamp);
        for (column, channel) in channels.iter().enumerate() {
            values[column].push(row.value(*channel));
        }
    }
    MeterTable {
        timestamps,
        channels,
        values,
    }
}

/// Maximal runs of consecutive, identical, present samples as
/// (start_index, length, value).
fn constant_runs(values: &[Option<f64>]) -> Vec<(usize, usize, f64)> {
    let mut runs = Vec::new();
    let mut current: Option<(usize, usize, f64)> = None;
    for (i, value) in values.iter().enumerate() {
        match (*value, current) {
            (Some(v), Some((start, len, run_value))) if v == run_value => {
                current = Some((start, len + 1, run_value));
            }
            (Some(v), prior) => {
                if let Some(run) = prior {
                    runs.push(run);
                }
                current = Some((i, 1, v));
            }
            (None, prior) => {
                if let Some(run) = prior {
                    runs.push(run);
                }
                current = None;
            }
        }
    }
    if let Some(run) = current {
        runs.push(run);
    }
    runs
}

fn distinct_count_in_span(values: &[Option<f64>], start: usize, end: usize) -> usize {
    let mut seen: Vec<f64> = Vec::new();
    for value in values[start..=end].iter().flatten() {
        if !seen.contains(value) {
            seen.push(*value);
        }
    }
    seen.len()
}

fn mean_run_length(values: &[Option<f64>]) -> f64 {
    let runs = constant_runs(values);
    if runs.is_empty() {
        return 0.0;
    }
    let total: usize = runs.iter().map(|(_, len, _)| *len).sum();
    total as f64 / runs.len() as f64
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn robust_stats(window: &[f64]) -> (f64, f64) {
    let mut sorted = window.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let med = median(&sorted);
    let mut deviations: Vec<f64> = sorted.iter().map(|v| (v - med).abs()).collect();
    deviations.sort_by(|a, b| a.total_cmp(b));
    let mad = median(&deviations);
    (med, mad)
}

/// Screen a measurement batch for implausible channels and samples.
pub fn screen_quality(series: &MeasurementSeries, options: &QualityOptions) -> QualityReport {
    let mut findings = Vec::new();
    for meter_id in series.meter_ids() {
        let table = meter_table(series, &meter_id);
        let mut unusable = vec![false; table.channels.len()];

        // Stuck channels: a long frozen run while some sibling moves.
        for (column, channel) in table.channels.iter().enumerate() {
            for (start, len, value) in constant_runs(&table.values[column]) {
                if len < options.stuck_min_len {
                    continue;
                }
                let end = start + len - 1;
                let sibling_moves = (0..table.channels.len())
                    .filter(|c| *c != column)
                    .any(|c| distinct_count_in_span(&table.values[c], start, end) >= 2);
                if sibling_moves {
                    unusable[column] = true;
                    findings.push(QualityFinding {
                        meter_id: meter_id.clone(),
                        channel: *channel,
                        kind: QualityKind::Stuck,
                        timestamps: table.timestamps[start..=end].to_vec(),
                        detail: format!(
                            "value held at {value} for {len} samples while sibling channels varied"
                        ),
                    });
                }
            }
        }

        // Stepped channels: long plateaus separated by coarse relative jumps
        // while sibling channels move sample to sample.
        for (column, channel) in table.channels.iter().enumerate() {
            if unusable[column] {
                continue;
            }
            let runs = constant_runs(&table.values[column]);
            if runs.len() < 3 {
                continue;
            }
            let mean_len =
                runs.iter().map(|(_, len, _)| *len).sum::<usize>() as f64 / runs.len() as f64;
            if mean_len < 4.0 {
                continue;
            }
            let mut jumps = Vec::new();
            let mut coarse = true;
            for pair in runs.windows(2) {
                let (_, _, prev) = pair[0];
                let (_, _, next) = pair[1];
                let scale = prev.abs().min(next.abs()).max(1e-12);
                let rel = (next - prev).abs() / scale;
                if rel < options.step_rel_threshold * (1.0 - 1e-6) {
                    coarse = false;
                    break;
                }
                jumps.push(rel);
            }
            if !coarse {
                continue;
            }
            let sibling_varies = (0..table.channels.len())
                .filter(|c| *c != column && !unusable[*c])
                .any(|c| {
                    let len = mean_run_length(&table.values[c]);
                    len > 0.0 && len <= 1.5
                });
            if !sibling_varies {
                continue;
            }
            jumps.sort_by(|a, b| a.total_cmp(b));
            let step_pct = median(&jumps) * 100.0;
            unusable[column] = true;
            let affected: Vec<DateTime<Utc>> = table
                .values[column]
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_some())
                .map(|(i, _)| table.timestamps[i])
                .collect();
            findings.push(QualityFinding {
                meter_id: meter_id.clone(),
                channel: *channel,
                kind: QualityKind::Stepped,
                timestamps: affected,
                detail: format!(
                    "{} plateaus with jumps of about {step_pct:.2}% between them",
                    runs.len()
                ),
            });
        }

        // Gross errors: isolated samples far outside the local robust spread.
        let half_window = options.gross_window.max(3) / 2;
        for (column, channel) in table.channels.iter().enumerate() {
            if unusable[column] {
                continue;
            }
            let present: Vec<(usize, f64)> = table.values[column]
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i, v)))
                .collect();
            if present.len() < 5 {
                continue;
            }
            let mut suspects = Vec::new();
            let mut worst_z: f64 = 0.0;
            for (k, (row, value)) in present.iter().enumerate() {
                let lo = k.saturating_sub(half_window);
                let hi = (k + half_window).min(present.len() - 1);
                let window: Vec<f64> = present[lo..=hi].iter().map(|(_, v)| *v).collect();
                let (med, mad) = robust_stats(&window);
                let sigma = 1.4826 * mad + 1e-6 * med.abs().max(1.0);
                let z = (value - med).abs() / sigma;
                if z > options.gross_z_threshold {
                    suspects.push(table.timestamps[*row]);
                    worst_z = worst_z.max(z);
                }
            }
            if !suspects.is_empty() {
                findings.push(QualityFinding {
                    meter_id: meter_id.clone(),
                    channel: *channel,
                    kind: QualityKind::GrossError,
                    detail: format!(
                        "{} samples deviate from the local median, worst robust z {worst_z:.1}",
                        suspects.len()
                    ),
                    timestamps: suspects,
                });
            }
        }

        // Missing samples in channels the meter otherwise reports.
        for (column, channel) in table.channels.iter().enumerate() {
            let gaps: Vec<DateTime<Utc>> = table.values[column]
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_none())
                .map(|(i, _)| table.timestamps[i])
                .collect();
            if !gaps.is_empty() {
                findings.push(QualityFinding {
                    meter_id: meter_id.clone(),
                    channel: *channel,
                    kind: QualityKind::Missing,
                    detail: format!("{} of {} samples absent", gaps.len(), table.timestamps.len()),
                    timestamps: gaps,
                });
            }
        }
    }
    QualityReport { findings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::MeasurementRow;
    use chrono::TimeZone;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ts(step: usize) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 5, 0, 0, 0).unwrap()
            + chrono::Duration::seconds(30 * step as i64)
    }

    /// A healthy meter trace: slowly varying voltage and current with mild
    /// measurement noise on every channel.
    fn healthy_series(samples: usize, seed: u64) -> MeasurementSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for k in 0..samples {
            let phase = k as f64 / samples as f64 * std::f64::consts::TAU;
            let mut row = MeasurementRow::new(ts(k), "sub1");
            let noise = |rng: &mut ChaCha8Rng, sigma: f64| {
                let n: f64 = rng.sample(StandardNormal);
                n * sigma
            };
            row.set(
                Channel::VoltageAb,
                415.0 + 2.0 * phase.sin() + noise(&mut rng, 0.4),
            );
            row.set(
                Channel::VoltageBc,
                414.5 + 1.8 * phase.cos() + noise(&mut rng, 0.4),
            );
            row.set(
                Channel::VoltageCa,
                415.3 + 2.1 * (phase + 0.5).sin() + noise(&mut rng, 0.4),
            );
            row.set(
                Channel::CurrentA,
                120.0 + 30.0 * phase.sin() + noise(&mut rng, 0.3),
            );
            row.set(
                Channel::CurrentB,
                118.0 + 28.0 * phase.sin() + noise(&mut rng, 0.3),
            );
            row.set(
                Channel::CurrentC,
                122.0 + 31.0 * phase.sin() + noise(&mut rng, 0.3),
            );
            row.set(
                Channel::ActiveTotal,
                -82_000.0 - 20_000.0 * phase.sin() + noise(&mut rng, 250.0),
            );
            row.set(
                Channel::ReactiveTotal,
                -21_000.0 - 5_000.0 * phase.sin() + noise(&mut rng, 400.0),
            );
            rows.push(row);
        }
        MeasurementSeries::new(rows)
    }

    #[test]
    fn healthy_data_raises_no_findings() {
        for seed in [1, 2, 3, 4, 5] {
            let series = healthy_series(200, seed);
            let report = screen_quality(&series, &QualityOptions::default());
            assert!(
                report.findings.is_empty(),
                "seed {seed} produced {:?}",
                report.findings
            );
        }
    }

    #[test]
    fn frozen_channel_with_moving_siblings_is_stuck() {
        let mut series = healthy_series(120, 9);
        let rows: Vec<MeasurementRow> = series
            .rows()
            .iter()
            .cloned()
            .enumerate()
            .map(|(k, mut row)| {
                if (40..85).contains(&k) {
                    row.set(Channel::VoltageAb, 414.71);
                }
                row
            })
            .collect();
        series = MeasurementSeries::new(rows);
        let report = screen_quality(&series, &QualityOptions::default());
        let stuck: Vec<&QualityFinding> = report
            .findings
            .iter()
            .filter(|f| f.kind == QualityKind::Stuck)
            .collect();
        assert_eq!(stuck.len(), 1);
        assert_eq!(stuck[0].channel, Channel::VoltageAb);
        assert_eq!(stuck[0].count(), 45);
        assert!(report.channel_unusable("sub1", Channel::VoltageAb));
        assert!(report.sample_suspect("sub1", Channel::VoltageAb, ts(50)));
        assert!(!report.channel_unusable("sub1", Channel::CurrentA));
    }

    #[test]
    fn frozen_meter_without_sibling_motion_is_not_stuck() {
        let mut rows = Vec::new();
        for k in 0..60 {
            let mut row = MeasurementRow::new(ts(k), "sub1");
            row.set(Channel::VoltageAb, 415.0);
            row.set(Channel::CurrentA, 118.0);
            rows.push(row);
        }
        let report = screen_quality(&MeasurementSeries::new(rows), &QualityOptions::default());
        assert_eq!(report.count(QualityKind::Stuck), 0);
    }

    #[test]
    fn report_by_exception_channel_is_stepped() {
        let mut series = healthy_series(200, 11);
        // Re-log active power through a 1.2% relative deadband: the stored
        // value only updates when the underlying ramp has drifted that far,
        // giving plateaus of about ten samples between coarse jumps.
        let mut logged = -100_000.0;
        let rows: Vec<MeasurementRow> = series
            .rows()
            .iter()
            .cloned()
            .enumerate()
            .map(|(k, mut row)| {
                let smooth = -100_000.0 * (1.0 + 0.0012 * k as f64);
                if (smooth - logged).abs() >= 0.012 * logged.abs() {
                    logged = smooth;
                }
                row.set(Channel::ActiveTotal, logged);
                row
            })
            .collect();
        series = MeasurementSeries::new(rows);
        let report = screen_quality(&series, &QualityOptions::default());
        let stepped: Vec<&QualityFinding> = report
            .findings
            .iter()
            .filter(|f| f.kind == QualityKind::Stepped)
            .collect();
        assert_eq!(stepped.len(), 1);
        assert_eq!(stepped[0].channel, Channel::ActiveTotal);
        assert!(report.channel_unusable("sub1", Channel::ActiveTotal));
        assert!(stepped[0].detail.contains("plateaus"));
    }

    #[test]
    fn isolated_spike_is_a_gross_error_at_its_own_timestamp_only() {
        let mut series = healthy_series(150, 4);
        let rows: Vec<MeasurementRow> = series
            .rows()
            .iter()
            .cloned()
            .enumerate()
            .map(|(k, mut row)| {
                if k == 70 {
                    let value = row.value(Channel::CurrentB).unwrap();
                    row.set(Channel::CurrentB, value * 10.0);
                }
                row
            })
            .collect();
        series = MeasurementSeries::new(rows);
        let report = screen_quality(&series, &QualityOptions::default());
        let gross: Vec<&QualityFinding> = report
            .findings
            .iter()
            .filter(|f| f.kind == QualityKind::GrossError)
            .collect();
        assert_eq!(gross.len(), 1);
        assert_eq!(gross[0].channel, Channel::CurrentB);
        assert_eq!(gross[0].timestamps, vec![ts(70)]);
        assert!(report.sample_suspect("sub1", Channel::CurrentB, ts(70)));
        assert!(!report.sample_suspect("sub1", Channel::CurrentB, ts(71)));
        assert!(!report.channel_unusable("sub1", Channel::CurrentB));
    }

    #[test]
    fn absent_samples_are_reported_as_missing() {
        let mut series = healthy_series(50, 8);
        let rows: Vec<MeasurementRow> = series
            .rows()
            .iter()
            .cloned()
            .enumerate()
            .map(|(k, mut row)| {
                if k == 10 || k == 31 {
                    row.values.remove(&Channel::ReactiveTotal);
                }
                row
            })
            .collect();
        series = MeasurementSeries::new(rows);
        let report = screen_quality(&series, &QualityOptions::default());
        let missing: Vec<&QualityFinding> = report
            .findings
            .iter()
            .filter(|f| f.kind == QualityKind::Missing)
            .collect();
        assert_eq!(missing.len(), 1);
        assert_eq!(missing[0].channel, Channel::ReactiveTotal);
        assert_eq!(missing[0].timestamps, vec![ts(10), ts(31)]);
        assert!(!report.sample_suspect("sub1", Channel::ReactiveTotal, ts(10)));
    }
}
