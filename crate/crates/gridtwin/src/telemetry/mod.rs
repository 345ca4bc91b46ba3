//! Meter data: specifications, measurement storage, CSV exchange, accuracy
//! models, plausibility screening, and synthetic data generation.
//!
//! Measurements are stored in SI units (volts, amps, watts, vars) regardless
//! of the CSV exchange format, which carries powers in kW and kvar. Power
//! channels follow the network convention: positive means net injection into
//! the network, so a metered load shows negative `p_tot`.

mod io;
mod quality;
mod synth;
mod tolerance;

pub use io::{load_meter_specs, read_measurements_csv, write_measurements_csv};
pub use quality::{screen_quality, QualityFinding, QualityKind, QualityOptions, QualityReport};
pub use synth::{synthesize_measurements, SynthChannels, SynthOptions};
pub use tolerance::{
    current_tolerance_a, power_tolerance_w, reactive_tolerance_var, sigma_from_tolerance,
    split_total_power, voltage_tolerance_v,
};

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("measurement file header mismatch: {0}")]
    Header(String),
    #[error("bad timestamp {value:?} at line {line}: {detail}")]
    Timestamp {
        value: String,
        line: u64,
        detail: String,
    },
    #[error("bad numeric value {value:?} in column {column} at line {line}")]
    Numeric {
        value: String,
        column: String,
        line: u64,
    },
    #[error("meter specification error: {0}")]
    Spec(String),
    #[error("meter spec file: {0}")]
    SpecFormat(#[from] serde_json::Error),
    #[error("meter {meter} references unknown bus {bus}")]
    UnknownBus { meter: String, bus: String },
    #[error("meter {meter} sits on bus {bus} which lacks full three-phase service")]
    PartialPhases { meter: String, bus: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One measured quantity on a meter. Raw meters report line voltages,
/// phase currents, and total powers; per-phase channels carry the extended
/// set used by synthetic data and lab-grade instruments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    VoltageAb,
    VoltageBc,
    VoltageCa,
    VoltageA,
    VoltageB,
    VoltageC,
    CurrentA,
    CurrentB,
    CurrentC,
    ActiveTotal,
    ReactiveTotal,
    ActiveA,
    ActiveB,
    ActiveC,
    ReactiveA,
    ReactiveB,
    ReactiveC,
}

impl Channel {
    pub fn label(self) -> &'static str {
        match self {
            Channel::VoltageAb => "v_ab",
            Channel::VoltageBc => "v_bc",
            Channel::VoltageCa => "v_ca",
            Channel::VoltageA => "v_a",
            Channel::VoltageB => "v_b",
            Channel::VoltageC => "v_c",
            Channel::CurrentA => "i_a",
            Channel::CurrentB => "i_b",
            Channel::CurrentC => "i_c",
            Channel::ActiveTotal => "p_tot",
            Channel::ReactiveTotal => "q_tot",
            Channel::ActiveA => "p_a",
            Channel::ActiveB => "p_b",
            Channel::ActiveC => "p_c",
            Channel::ReactiveA => "q_a",
            Channel::ReactiveB => "q_b",
            Channel::ReactiveC => "q_c",
        }
    }

    pub fn from_label(label: &str) -> Option<Channel> {
        let channel = match label {
            "v_ab" => Channel::VoltageAb,
            "v_bc" => Channel::VoltageBc,
            "v_ca" => Channel::VoltageCa,
            "v_a" => Channel::VoltageA,
            "v_b" => Channel::VoltageB,
            "v_c" => Channel::VoltageC,
            "i_a" => Channel::CurrentA,
            "i_b" => Channel::CurrentB,
            "i_c" => Channel::CurrentC,
            "p_tot" => Channel::ActiveTotal,
            "q_tot" => Channel::ReactiveTotal,
            "p_a" => Channel::ActiveA,
            "p_b" => Channel::ActiveB,
            "p_c" => Channel::ActiveC,
            "q_a" => Channel::ReactiveA,
            "q_b" => Channel::ReactiveB,
            "q_c" => Channel::ReactiveC,
            _ => return None,
        };
        Some(channel)
    }

    /// True for kW/kvar columns that need unit conversion at the CSV boundary.
    pub fn is_power(self) -> bool {
        matches!(
            self,
            Channel::ActiveTotal
                | Channel::ReactiveTotal
                | Channel::ActiveA
                | Channel::ActiveB
                | Channel::ActiveC
                | Channel::ReactiveA
                | Channel::ReactiveB
                | Channel::ReactiveC
        )
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

fn default_voltage_tol() -> f64 {
    0.5
}

fn default_current_tol() -> f64 {
    0.2
}

fn default_active_tol() -> f64 {
    1.0
}

fn default_reactive_tol() -> f64 {
    2.0
}

fn default_current_floor() -> f64 {
    20.0
}

/// Nameplate data and accuracy class for one revenue or monitoring meter.
///
/// `rated_voltage_v` is the line-line service voltage, `rated_current_a` the
/// CT primary rating. Tolerance percentages bound the instrument error at
/// full confidence; one standard deviation is a third of the bound. Current,
/// active, and reactive channels keep their absolute accuracy floor below
/// `valid_current_floor_pct` of rated current.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterSpec {
    pub meter_id: String,
    pub bus: String,
    pub rated_voltage_v: f64,
    pub rated_current_a: f64,
    #[serde(default = "default_voltage_tol")]
    pub voltage_tol_pct: f64,
    #[serde(default = "default_current_tol")]
    pub current_tol_pct: f64,
    #[serde(default = "default_active_tol")]
    pub active_tol_pct: f64,
    #[serde(default = "default_reactive_tol")]
    pub reactive_tol_pct: f64,
    #[serde(default = "default_current_floor")]
    pub valid_current_floor_pct: f64,
}

impl MeterSpec {
    pub fn new(meter_id: &str, bus: &str, rated_voltage_v: f64, rated_current_a: f64) -> Self {
        MeterSpec {
            meter_id: meter_id.to_string(),
            bus: bus.to_string(),
            rated_voltage_v,
            rated_current_a,
            voltage_tol_pct: default_voltage_tol(),
            current_tol_pct: default_current_tol(),
            active_tol_pct: default_active_tol(),
            reactive_tol_pct: default_reactive_tol(),
            valid_current_floor_pct: default_current_floor(),
        }
    }

    /// CT floor in amps below which absolute current accuracy stops shrinking.
    pub fn current_floor_a(&self) -> f64 {
        self.rated_current_a * self.valid_current_floor_pct / 100.0
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        if self.meter_id.is_empty() {
            return Err(TelemetryError::Spec("meter_id must not be empty".into()));
        }
        let positives = [
            ("rated_voltage_v", self.rated_voltage_v),
            ("rated_current_a", self.rated_current_a),
            ("voltage_tol_pct", self.voltage_tol_pct),
            ("current_tol_pct", self.current_tol_pct),
            ("active_tol_pct", self.active_tol_pct),
            ("reactive_tol_pct", self.reactive_tol_pct),
            ("valid_current_floor_pct", self.valid_current_floor_pct),
        ];
        for (name, value) in positives {
            if !(value.is_finite() && value > 0.0) {
                return Err(TelemetryError::Spec(format!(
                    "meter {}: {} must be a positive number, got {}",
                    self.meter_id, name, value
                )));
            }
        }
        Ok(())
    }
}

/// All channel readings of one meter at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub timestamp: DateTime<Utc>,
    pub meter_id: String,
    pub values: BTreeMap<Channel, f64>,
}

impl MeasurementRow {
    pub fn new(timestamp: DateTime<Utc>, meter_id: &str) -> Self {
        MeasurementRow {
            timestamp,
            meter_id: meter_id.to_string(),
            values: BTreeMap::new(),
        }
    }

    pub fn value(&self, channel: Channel) -> Option<f64> {
        self.values.get(&channel).copied()
    }

    pub fn set(&mut self, channel: Channel, value: f64) {
        if value.is_finite() {
            self.values.insert(channel, value);
        }
    }
}

/// A batch of meter readings ordered by timestamp, then meter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSeries {
    rows: Vec<MeasurementRow>,
}

impl MeasurementSeries {
    pub fn new(mut rows: Vec<MeasurementRow>) -> Self {
        rows.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.meter_id.cmp(&b.meter_id))
        });
        MeasurementSeries { rows }
    }

    pub fn rows(&self) -> &[MeasurementRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn push(&mut self, row: MeasurementRow) {
        let key = (row.timestamp, row.meter_id.clone());
        let pos = self
            .rows
            .partition_point(|r| (r.timestamp, r.meter_id.clone()) <= key);
        self.rows.insert(pos, row);
    }

    pub fn extend(&mut self, other: MeasurementSeries) {
        self.rows.extend(other.rows);
        self.rows.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.meter_id.cmp(&b.meter_id))
        });
    }

    /// Distinct timestamps in ascending order.
    pub fn timestamps(&self) -> Vec<DateTime<Utc>> {
        let mut out: Vec<DateTime<Utc>> = self.rows.iter().map(|r| r.timestamp).collect();
        out.dedup();
        out
    }

    /// Distinct meter ids in first-seen order.
    pub fn meter_ids(&self) -> Vec<String> {
        let mut out = Vec::new();
        for row in &self.rows {
            if !out.contains(&row.meter_id) {
                out.push(row.meter_id.clone());
            }
        }
        out
    }

    pub fn rows_at(&self, timestamp: DateTime<Utc>) -> impl Iterator<Item = &MeasurementRow> {
        self.rows.iter().filter(move |r| r.timestamp == timestamp)
    }

    pub fn row(&self, timestamp: DateTime<Utc>, meter_id: &str) -> Option<&MeasurementRow> {
        self.rows
            .iter()
            .find(|r| r.timestamp == timestamp && r.meter_id == meter_id)
    }

    /// Channel values of one meter over time. Each entry corresponds to a row
    /// the meter reported; `None` marks a row where this channel was absent.
    pub fn channel_series(
        &self,
        meter_id: &str,
        channel: Channel,
    ) -> Vec<(DateTime<Utc>, Option<f64>)> {
        self.rows
            .iter()
            .filter(|r| r.meter_id == meter_id)
            .map(|r| (r.timestamp, r.value(channel)))
            .collect()
    }

    /// Channels that appear on a meter anywhere in the series.
    pub fn channels_of(&self, meter_id: &str) -> Vec<Channel> {
        let mut out = Vec::new();
        for row in self.rows.iter().filter(|r| r.meter_id == meter_id) {
            for channel in row.values.keys() {
                if !out.contains(channel) {
                    out.push(*channel);
                }
            }
        }
        out.sort();
        out
    }
}
