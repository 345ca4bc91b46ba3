//! CSV measurement exchange and meter specification files.
//!
//! Two fixed column layouts are accepted. The raw layout matches what
//! substation meters export: line voltages, phase currents, and signed
//! totals. The extended layout adds per-phase voltages and powers and is
//! what the synthetic data generator writes.
//!
//! ```text
//! timestamp,meter_id,v_ab,v_bc,v_ca,i_a,i_b,i_c,p_tot,q_tot
//! timestamp,meter_id,v_ab,v_bc,v_ca,v_a,v_b,v_c,i_a,i_b,i_c,p_tot,q_tot,p_a,p_b,p_c,q_a,q_b,q_c
//! ```
//!
//! Timestamps are RFC 3339 and normalised to UTC. Voltages are volts,
//! currents amps, powers kW and kvar on disk (watts and vars in memory).
//! Empty cells and `nan` mark missing readings. Positive power is net
//! injection into the network.

use std::io::{Read, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Deserialize;

use super::{Channel, MeasurementRow, MeasurementSeries, MeterSpec, TelemetryError};

const RAW_CHANNELS: [Channel; 8] = [
    Channel::VoltageAb,
    Channel::VoltageBc,
    Channel::VoltageCa,
    Channel::CurrentA,
    Channel::CurrentB,
    Channel::CurrentC,
    Channel::ActiveTotal,
    Channel::ReactiveTotal,
];

const EXTENDED_CHANNELS: [Channel; 17] = [
    Channel::VoltageAb,
    Channel::VoltageBc,
    Channel::VoltageCa,
    Channel::VoltageA,
    Channel::VoltageB,
    Channel::VoltageC,
    Channel::CurrentA,
    Channel::CurrentB,
    Channel::CurrentC,
    Channel::ActiveTotal,
    Channel::ReactiveTotal,
    Channel::ActiveA,
    Channel::ActiveB,
    Channel::ActiveC,
    Channel::ReactiveA,
    Channel::ReactiveB,
    Channel::ReactiveC,
];

fn header_for(channels: &[Channel]) -> Vec<&'static str> {
    let mut header = vec!["timestamp", "meter_id"];
    header.extend(channels.iter().map(|c| c.label()));
    header
}

/// Read a measurement CSV in either accepted layout.
pub fn read_measurements_csv<R: Read>(reader: R) -> Result<MeasurementSeries, TelemetryError> {
    let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = csv_reader
        .headers()?
        .iter()
        .map(|h| h.to_string())
        .collect();

    let channels: &[Channel] = if header == header_for(&RAW_CHANNELS) {
        &RAW_CHANNELS
    } else if header == header_for(&EXTENDED_CHANNELS) {
        &EXTENDED_CHANNELS
    } else {
        return Err(TelemetryError::Header(format!(
            "expected the raw layout ({}) or the extended layout ({}), got: {}",
            header_for(&RAW_CHANNELS).join(","),
            header_for(&EXTENDED_CHANNELS).join(","),
            header.join(",")
        )));
    };

    let mut rows = Vec::new();
    for record in csv_reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let raw_ts = record.get(0).unwrap_or_default();
        let timestamp = DateTime::parse_from_rfc3339(raw_ts)
            .map_err(|e| TelemetryError::Timestamp {
                value: raw_ts.to_string(),
                line,
                detail: e.to_string(),
            })?
            .with_timezone(&Utc);
        let meter_id = record.get(1).unwrap_or_default();
        if meter_id.is_empty() {
            return Err(TelemetryError::Numeric {
                value: String::new(),
                column: "meter_id".into(),
                line,
            });
        }
        let mut row = MeasurementRow::new(timestamp, meter_id);
        for (offset, channel) in channels.iter().enumerate() {
            let cell = record.get(offset + 2).unwrap_or_default();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                continue;
            }
            let parsed: f64 = cell.parse().map_err(|_| TelemetryError::Numeric {
                value: cell.to_string(),
                column: channel.label().to_string(),
                line,
            })?;
            let value = if channel.is_power() {
                parsed * 1e3
            } else {
                parsed
            };
            row.set(*channel, value);
        }
        rows.push(row);
    }
    Ok(MeasurementSeries::new(rows))
}

/// Write a measurement CSV. The extended layout is chosen automatically when
/// any row carries a per-phase channel; otherwise the raw layout is used.
pub fn write_measurements_csv<W: Write>(
    series: &MeasurementSeries,
    writer: W,
) -> Result<(), TelemetryError> {
    let extended = series.rows().iter().any(|row| {
        row.values
            .keys()
            .any(|c| !RAW_CHANNELS.contains(c))
    });
    let channels: &[Channel] = if extended {
        &EXTENDED_CHANNELS
    } else {
        &RAW_CHANNELS
    };

    let mut csv_writer = csv::Writer::from_writer(writer);
    csv_writer.write_record(header_for(channels))?;
    for row in series.rows() {
        let mut record = vec![
            row.timestamp
                .to_rfc3339_opts(SecondsFormat::Secs, true),
            row.meter_id.clone(),
        ];
        for channel in channels {
            match row.value(*channel) {
                Some(value) => {
                    let scaled = if channel.is_power() { value / 1e3 } else { value };
                    record.push(format!("{scaled}"));
                }
                None => record.push(String::new()),
            }
        }
        csv_writer.write_record(&record)?;
    }
    csv_writer.flush()?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeterFile {
    meters: Vec<MeterSpec>,
}

/// Parse a meter specification file: a JSON object with a `meters` array.
/// Tolerance fields are optional and default to the standard meter class.
pub fn load_meter_specs(text: &str) -> Result<Vec<MeterSpec>, TelemetryError> {
    let file: MeterFile = serde_json::from_str(text)?;
    for spec in &file.meters {
        spec.validate()?;
    }
    for (i, spec) in file.meters.iter().enumerate() {
        if file.meters[..i].iter().any(|s| s.meter_id == spec.meter_id) {
            return Err(TelemetryError::Spec(format!(
                "duplicate meter_id {}",
                spec.meter_id
            )));
        }
    }
    Ok(file.meters)
}
