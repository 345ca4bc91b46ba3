//! Batch runs behind the command line: a TOML run configuration shared by
//! every subcommand, loaders for the input files, and the command bodies
//! that write plain CSV and text artifacts into an output directory.
//!
//! Every command echoes the fully resolved configuration to
//! `<outdir>/run_config.toml` so a run can be reproduced from its output
//! directory alone. With the same configuration and seed, outputs are
//! byte-identical regardless of the worker thread count.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Timelike, Utc};
use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsse::{
    analyze_observability, assemble_measurements, correct_taps, estimate_state, AssembleOptions,
    DsseError, EstimatorOptions,
};
use crate::exportlimit::{
    estimate_curtailment, scheme_benefit, CurtailmentOffset, ExportError, ExportScheme,
    CO2_INTENSITY_KG_PER_MWH, ENERGY_PRICE_USD_PER_MWH,
};
use crate::netmodel::{parse_network, NetError, NetworkModel};
use crate::powerflow::{
    linearize, solve_powerflow, InjectionSet, PfError, PowerFlowOptions, SlackSpec,
};
use crate::telemetry::{
    load_meter_specs, read_measurements_csv, screen_quality, synthesize_measurements,
    write_measurements_csv, Channel, MeasurementSeries, MeterSpec, QualityOptions, QualityReport,
    SynthChannels, SynthOptions, TelemetryError,
};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Network(#[from] NetError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Power(#[from] PfError),
    #[error(transparent)]
    Estimation(#[from] DsseError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl RunError {
    /// Process exit code: 1 for input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Power(err) | RunError::Estimation(DsseError::Power(err)) => {
                match err {
                    PfError::NotConverged { .. } | PfError::SingularJacobian { .. } => 2,
                    _ => 1,
                }
            }
            RunError::Estimation(DsseError::NotConverged { .. })
            | RunError::Estimation(DsseError::LinearAlgebra(_)) => 2,
            _ => 1,
        }
    }

    /// Extra context worth printing on failure, such as the mismatch
    /// history of a diverged power flow.
    pub fn diagnostic(&self) -> Option<String> {
        let pf = match self {
            RunError::Power(err) | RunError::Estimation(DsseError::Power(err)) => err,
            _ => return None,
        };
        if let PfError::NotConverged {
            mismatch_history, ..
        } = pf
        {
            let steps: Vec<String> = mismatch_history
                .iter()
                .map(|m| format!("{m:.3e}"))
                .collect();
            Some(format!("mismatch history: {}", steps.join(" ")))
        } else {
            None
        }
    }
}

fn read_file(path: &Path) -> Result<String, RunError> {
    fs::read_to_string(path).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, content: &str) -> Result<(), RunError> {
    fs::write(path, content).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Run settings for every subcommand, loadable from a TOML file.
///
/// Relative paths are taken as given, so they resolve against the working
/// directory of the invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Network description, JSON.
    pub network: PathBuf,
    /// Meter specifications, JSON.
    pub meters: PathBuf,
    /// Measurement CSV. Written by `synth`, read by everything else.
    pub measurements: PathBuf,
    /// Output directory, created if missing.
    pub outdir: PathBuf,
    /// Base seed for every stochastic step. Step k uses `seed + k`.
    pub seed: u64,
    /// Process every n-th distinct timestamp of the measurement series.
    pub stride: usize,
    /// Worker threads for the per-timestamp fan-out. Zero lets the runtime
    /// pick. Results are ordered by timestamp either way.
    pub jobs: usize,
    /// Slack line-voltage magnitude in per unit for synthetic runs.
    pub slack_pu: f64,
    pub synth: SynthConfig,
    pub estimator: EstimatorConfig,
    pub export: ExportConfig,
    pub tap_sweep: TapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: PathBuf::from("network.json"),
            meters: PathBuf::from("meters.json"),
            measurements: PathBuf::from("measurements.csv"),
            outdir: PathBuf::from("out"),
            seed: 1,
            stride: 4,
            jobs: 0,
            slack_pu: 1.0,
            synth: SynthConfig::default(),
            estimator: EstimatorConfig::default(),
            export: ExportConfig::default(),
            tap_sweep: TapConfig::default(),
        }
    }
}

/// Shape of the synthetic day: a demand curve peaking in the evening and a
/// clear-sky solar curve between sunrise and sunset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub start: DateTime<Utc>,
    pub steps: usize,
    pub cadence_s: i64,
    /// Multiplier on class-consistent meter noise. Zero gives exact readings.
    pub noise_scale: f64,
    /// Relative amplitude of the demand curve around its mean.
    pub demand_swing: f64,
    pub sunrise_h: f64,
    pub sunset_h: f64,
    /// Cap on total generator export, MW. Generation above the cap is
    /// curtailed in the truth run, which is what the export commands later
    /// quantify.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub export_cap_mw: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            start: DateTime::parse_from_rfc3339("2024-06-01T00:00:00Z")
                .expect("valid timestamp")
                .with_timezone(&Utc),
            steps: 288,
            cadence_s: 300,
            noise_scale: 1.0,
            demand_swing: 0.3,
            sunrise_h: 5.0,
            sunset_h: 19.5,
            export_cap_mw: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Weight sigma for structural zero-injection equations, pu.
    pub virtual_sigma_pu: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let est = EstimatorOptions::default();
        let asm = AssembleOptions::default();
        EstimatorConfig {
            max_iterations: est.max_iterations,
            gradient_tolerance: est.gradient_tolerance,
            virtual_sigma_pu: asm.virtual_sigma_pu,
        }
    }
}

/// Settings for the export-limit analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// Bus whose export the schemes govern.
    pub injection_bus: String,
    /// Meter measuring the generator's output.
    pub solar_meter: String,
    /// Installed generation capacity, MW.
    pub capacity_mw: f64,
    /// Statutory upper voltage limit, per unit.
    pub upper_limit_pu: f64,
    /// Schemes to score: `unity`, `q_control:<pf>`, `conservative:<pct>`.
    pub schemes: Vec<String>,
    pub price_usd_per_mwh: f64,
    pub co2_kg_per_mwh: f64,
    /// Fixed potential-output offset in MW. Leave unset to fit the offset
    /// from visibly uncurtailed samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_mw: Option<f64>,
    /// Output below this is treated as uncurtailed when fitting the offset.
    /// Defaults to 90% of capacity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uncurtailed_mw: Option<f64>,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            injection_bus: String::new(),
            solar_meter: String::new(),
            capacity_mw: 0.0,
            upper_limit_pu: 1.06,
            schemes: vec![
                "conservative:0.5".to_string(),
                "unity".to_string(),
                "q_control:0.9".to_string(),
            ],
            price_usd_per_mwh: ENERGY_PRICE_USD_PER_MWH,
            co2_kg_per_mwh: CO2_INTENSITY_KG_PER_MWH,
            offset_mw: None,
            uncurtailed_mw: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TapConfig {
    /// Transformers to correct. Empty means all of them.
    pub transformers: Vec<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, RunError> {
        let text = read_file(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|err| RunError::Config(format!("{}: {err}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.stride == 0 {
            return Err(RunError::Config("stride must be at least 1".into()));
        }
        if !(self.slack_pu > 0.0) {
            return Err(RunError::Config(format!(
                "slack voltage {} pu must be positive",
                self.slack_pu
            )));
        }
        if self.synth.steps == 0 {
            return Err(RunError::Config("synth.steps must be at least 1".into()));
        }
        if self.synth.cadence_s <= 0 {
            return Err(RunError::Config(format!(
                "synth.cadence_s {} must be positive",
                self.synth.cadence_s
            )));
        }
        if !(self.synth.sunset_h > self.synth.sunrise_h) {
            return Err(RunError::Config(format!(
                "sunset {} must come after sunrise {}",
                self.synth.sunset_h, self.synth.sunrise_h
            )));
        }
        Ok(())
    }

    fn load_network(&self) -> Result<NetworkModel, RunError> {
        let text = read_file(&self.network)?;
        Ok(parse_network(&text)?)
    }

    fn load_meters(&self) -> Result<Vec<MeterSpec>, RunError> {
        let text = read_file(&self.meters)?;
        Ok(load_meter_specs(&text)?)
    }

    fn load_series(&self) -> Result<MeasurementSeries, RunError> {
        let file = fs::File::open(&self.measurements).map_err(|source| RunError::Io {
            path: self.measurements.clone(),
            source,
        })?;
        Ok(read_measurements_csv(file)?)
    }

    /// Create the output directory and echo the resolved configuration
    /// into it.
    fn prepare_outdir(&self) -> Result<PathBuf, RunError> {
        fs::create_dir_all(&self.outdir).map_err(|source| RunError::Io {
            path: self.outdir.clone(),
            source,
        })?;
        let echo = toml::to_string_pretty(self)
            .map_err(|err| RunError::Config(format!("cannot serialize config: {err}")))?;
        let path = self.outdir.join("run_config.toml");
        write_file(&path, &echo)?;
        Ok(path)
    }

    fn estimator_options(&self) -> EstimatorOptions {
        EstimatorOptions {
            max_iterations: self.estimator.max_iterations,
            gradient_tolerance: self.estimator.gradient_tolerance,
            ..EstimatorOptions::default()
        }
    }

    fn assemble_options(&self) -> AssembleOptions {
        AssembleOptions {
            virtual_sigma_pu: self.estimator.virtual_sigma_pu,
        }
    }

    fn export_schemes(&self) -> Result<Vec<ExportScheme>, RunError> {
        if self.export.schemes.is_empty() {
            return Err(RunError::Config("no export schemes configured".into()));
        }
        self.export.schemes.iter().map(|s| parse_scheme(s)).collect()
    }

    /// Thread pool honoring the `jobs` setting.
    fn pool(&self) -> Result<rayon::ThreadPool, RunError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|err| RunError::Config(format!("cannot build thread pool: {err}")))
    }
}

/// Parse a scheme name: `unity`, `q_control:<pf>`, or `conservative:<pct>`.
pub fn parse_scheme(text: &str) -> Result<ExportScheme, RunError> {
    let text = text.trim();
    if text == "unity" || text == "dynamic_unity" {
        return Ok(ExportScheme::DynamicUnity);
    }
    if let Some(rest) = text.strip_prefix("q_control:") {
        let power_factor: f64 = rest
            .parse()
            .map_err(|_| RunError::Config(format!("bad power factor in scheme {text:?}")))?;
        return Ok(ExportScheme::QControl { power_factor });
    }
    if let Some(rest) = text.strip_prefix("conservative:") {
        let tolerance_pct: f64 = rest
            .parse()
            .map_err(|_| RunError::Config(format!("bad tolerance in scheme {text:?}")))?;
        return Ok(ExportScheme::Conservative { tolerance_pct });
    }
    Err(RunError::Config(format!(
        "unknown scheme {text:?}, expected unity, q_control:<pf>, or conservative:<pct>"
    )))
}

/// Every `stride`-th distinct timestamp of the series, oldest first.
pub fn strided_timestamps(series: &MeasurementSeries, stride: usize) -> Vec<DateTime<Utc>> {
    let unique: BTreeSet<DateTime<Utc>> = series.rows().iter().map(|r| r.timestamp).collect();
    unique
        .into_iter()
        .enumerate()
        .filter(|(k, _)| k % stride.max(1) == 0)
        .map(|(_, ts)| ts)
        .collect()
}

/// Fractional hour of day, UTC.
fn hour_of(ts: DateTime<Utc>) -> f64 {
    f64::from(ts.hour()) + f64::from(ts.minute()) / 60.0 + f64::from(ts.second()) / 3600.0
}

/// Demand multiplier with an evening peak at 18:00 and mean 1.
pub fn demand_factor(hour: f64, swing: f64) -> f64 {
    1.0 + swing * (std::f64::consts::TAU * (hour - 18.0) / 24.0).cos()
}

/// Clear-sky generation profile: a half sine between sunrise and sunset
/// peaking at 1, zero outside daylight.
pub fn solar_factor(hour: f64, sunrise_h: f64, sunset_h: f64) -> f64 {
    let x = (hour - sunrise_h) / (sunset_h - sunrise_h);
    if (0.0..=1.0).contains(&x) {
        (std::f64::consts::PI * x).sin()
    } else {
        0.0
    }
}

/// Model injections at one instant of the synthetic day: loads follow the
/// demand curve, generators the solar curve, optionally capped at the
/// configured export limit.
fn synthetic_injections(model: &NetworkModel, ts: DateTime<Utc>, synth: &SynthConfig) -> InjectionSet {
    let hour = hour_of(ts);
    let demand = demand_factor(hour, synth.demand_swing);
    let solar = solar_factor(hour, synth.sunrise_h, synth.sunset_h);
    let mut injections = InjectionSet::from_model(model);
    for load in &model.loads {
        let per_phase: Vec<Complex64> = load.power_va.iter().map(|s| -s * demand).collect();
        injections.set_injection_va(&load.id, per_phase);
    }
    for gen in &model.generators {
        let mut per_phase: Vec<Complex64> = gen.power_va.iter().map(|s| s * solar).collect();
        if let Some(cap_mw) = synth.export_cap_mw {
            let total_w: f64 = per_phase.iter().map(|s| s.re).sum();
            let cap_w = cap_mw * 1e6;
            if total_w > cap_w && total_w > 0.0 {
                let scale = cap_w / total_w;
                per_phase = per_phase.into_iter().map(|s| s * scale).collect();
            }
        }
        injections.set_injection_va(&gen.id, per_phase);
    }
    injections
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush().map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn stamp(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Solve the configured network at its nameplate loading and write the
/// voltage solution plus a one-line summary.
pub fn cmd_powerflow(cfg: &RunConfig) -> Result<Vec<PathBuf>, RunError> {
    cfg.validate()?;
    cfg.prepare_outdir()?;
    let model = cfg.load_network()?;
    let injections = InjectionSet::from_model(&model);
    let slack = SlackSpec::balanced(cfg.slack_pu);
    let solution = solve_powerflow(&model, &injections, &slack, &PowerFlowOptions::default())?;

    let index = model.node_index();
    let mut rows = Vec::with_capacity(index.len());
    for n in 0..index.len() {
        let (bus_idx, phase) = index.node(n);
        let bus = &model.buses[bus_idx];
        let u = solution.state.voltages_pu[n];
        let phase_base_v = bus.base_voltage_v / 3f64.sqrt();
        rows.push(vec![
            bus.id.clone(),
            phase.label().to_string(),
            format!("{:.9}", u.norm()),
            format!("{:.6}", u.arg().to_degrees()),
            format!("{:.3}", u.norm() * phase_base_v),
        ]);
    }
    let solution_path = cfg.outdir.join("powerflow_solution.csv");
    write_csv(
        &solution_path,
        &["bus", "phase", "v_mag_pu", "v_angle_deg", "v_mag_v"],
        &rows,
    )?;

    let s_base = model.power_base_va / 3.0;
    let slack_w: f64 = solution.slack_power_pu.iter().map(|s| s.re).sum::<f64>() * s_base;
    let slack_var: f64 = solution.slack_power_pu.iter().map(|s| s.im).sum::<f64>() * s_base;
    let summary_path = cfg.outdir.join("powerflow_summary.csv");
    write_csv(
        &summary_path,
        &[
            "iterations",
            "max_mismatch_pu",
            "slack_kw",
            "slack_kvar",
            "loss_kw",
        ],
        &[vec![
            solution.iterations.to_string(),
            format!("{:.3e}", solution.max_mismatch_pu),
            format!("{:.3}", slack_w / 1e3),
            format!("{:.3}", slack_var / 1e3),
            format!("{:.3}", solution.total_loss_pu.re * s_base / 1e3),
        ]],
    )?;
    Ok(vec![solution_path, summary_path])
}

/// Simulate a day of operation and write the meter readings the fleet
/// would have produced.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>, RunError> {
    cfg.validate()?;
    cfg.prepare_outdir()?;
    let model = cfg.load_network()?;
    let meters = cfg.load_meters()?;
    let slack = SlackSpec::balanced(cfg.slack_pu);
    let steps: Vec<(usize, DateTime<Utc>)> = (0..cfg.synth.steps)
        .map(|k| {
            let ts = cfg.synth.start + Duration::seconds(cfg.synth.cadence_s * k as i64);
            (k, ts)
        })
        .collect();

    let pool = cfg.pool()?;
    let per_step: Result<Vec<MeasurementSeries>, RunError> = pool.install(|| {
        steps
            .par_iter()
            .map(|&(k, ts)| {
                let injections = synthetic_injections(&model, ts, &cfg.synth);
                let solution =
                    solve_powerflow(&model, &injections, &slack, &PowerFlowOptions::default())?;
                let options = SynthOptions {
                    seed: cfg.seed.wrapping_add(k as u64),
                    noise_scale: cfg.synth.noise_scale,
                    channels: SynthChannels::Raw,
                };
                Ok(synthesize_measurements(&model, &solution, &meters, ts, &options)?)
            })
            .collect()
    });

    let mut series = MeasurementSeries::default();
    for batch in per_step? {
        series.extend(batch);
    }
    if let Some(parent) = cfg.measurements.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| RunError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    let file = fs::File::create(&cfg.measurements).map_err(|source| RunError::Io {
        path: cfg.measurements.clone(),
        source,
    })?;
    write_measurements_csv(&series, file)?;
    Ok(vec![cfg.measurements.clone()])
}

/// Screen the measurement file for stuck, stepped, grossly wrong, and
/// missing readings and write the findings.
pub fn cmd_quality(cfg: &RunConfig) -> Result<Vec<PathBuf>, RunError> {
    cfg.validate()?;
    cfg.prepare_outdir()?;
    let series = cfg.load_series()?;
    let report = screen_quality(&series, &QualityOptions::default());

    let mut rows = Vec::with_capacity(report.findings.len());
    for finding in &report.findings {
        let first = finding.timestamps.first().map(|&t| stamp(t)).unwrap_or_default();
        let last = finding.timestamps.last().map(|&t| stamp(t)).unwrap_or_default();
        rows.push(vec![
            finding.meter_id.clone(),
            finding.channel.label().to_string(),
            finding.kind.label().to_string(),
            finding.timestamps.len().to_string(),
            first,
            last,
            finding.detail.clone(),
        ]);
    }
    let path = cfg.outdir.join("quality_report.csv");
    write_csv(
        &path,
        &["meter", "channel", "kind", "samples", "first", "last", "detail"],
        &rows,
    )?;
    Ok(vec![path])
}

/// Estimate the network state at every strided timestamp and write the
/// voltage estimates, the measurement residuals, and an observability note.
pub fn cmd_dsse(cfg: &RunConfig) -> Result<Vec<PathBuf>, RunError> {
    cfg.validate()?;
    cfg.prepare_outdir()?;
    let model = cfg.load_network()?;
    let meters = cfg.load_meters()?;
    let series = cfg.load_series()?;
    let quality = screen_quality(&series, &QualityOptions::default());
    let stamps = strided_timestamps(&series, cfg.stride);
    if stamps.is_empty() {
        return Err(RunError::Config(format!(
            "{} has no timestamps",
            cfg.measurements.display()
        )));
    }
    let assemble_options = cfg.assemble_options();
    let estimator_options = cfg.estimator_options();

    let pool = cfg.pool()?;
    type StepRows = (Vec<Vec<String>>, Vec<Vec<String>>);
    let per_stamp: Result<Vec<StepRows>, RunError> = pool.install(|| {
        stamps
            .par_iter()
            .map(|&ts| {
                let equations =
                    assemble_measurements(&model, &meters, &series, ts, &quality, &assemble_options)?;
                let estimate = estimate_state(&model, &equations, &estimator_options)?;
                let index = model.node_index();
                let mut state_rows = Vec::with_capacity(index.len());
                for n in 0..index.len() {
                    let (bus_idx, phase) = index.node(n);
                    let u = estimate.state.voltages_pu[n];
                    state_rows.push(vec![
                        stamp(ts),
                        model.buses[bus_idx].id.clone(),
                        phase.label().to_string(),
                        format!("{:.9}", u.norm()),
                        format!("{:.6}", u.arg().to_degrees()),
                    ]);
                }
                let mut residual_rows = Vec::with_capacity(estimate.residuals.len());
                for entry in &estimate.residuals {
                    residual_rows.push(vec![
                        stamp(ts),
                        entry.source.clone(),
                        format!("{:.9}", entry.measured_pu),
                        format!("{:.9}", entry.estimated_pu),
                        format!("{:.3e}", entry.residual_pu),
                        format!("{:.4}", entry.weighted),
                    ]);
                }
                Ok((state_rows, residual_rows))
            })
            .collect()
    });

    let mut state_rows = Vec::new();
    let mut residual_rows = Vec::new();
    for (states, residuals) in per_stamp? {
        state_rows.extend(states);
        residual_rows.extend(residuals);
    }
    let states_path = cfg.outdir.join("state_estimates.csv");
    write_csv(
        &states_path,
        &["timestamp", "bus", "phase", "v_mag_pu", "v_angle_deg"],
        &state_rows,
    )?;
    let residuals_path = cfg.outdir.join("residuals.csv");
    write_csv(
        &residuals_path,
        &["timestamp", "source", "measured_pu", "estimated_pu", "residual_pu", "weighted"],
        &residual_rows,
    )?;

    let equations = assemble_measurements(
        &model,
        &meters,
        &series,
        stamps[0],
        &quality,
        &assemble_options,
    )?;
    let observability = analyze_observability(&model, &equations)?;
    let mut note = String::new();
    note.push_str(&format!("observable: {}\n", observability.observable));
    note.push_str(&format!("null dimension: {}\n", observability.null_dimension));
    if observability.unobservable_buses.is_empty() {
        note.push_str("unobservable buses: none\n");
    } else {
        note.push_str(&format!(
            "unobservable buses: {}\n",
            observability.unobservable_buses.join(", ")
        ));
    }
    let observability_path = cfg.outdir.join("observability.txt");
    write_file(&observability_path, &note)?;

    Ok(vec![states_path, residuals_path, observability_path])
}

/// Reconstruct the operating point at one timestamp from the metered head
/// of the feeder.
fn measured_voltages(
    model: &NetworkModel,
    meters: &[MeterSpec],
    series: &MeasurementSeries,
    ts: DateTime<Utc>,
    quality: &QualityReport,
) -> Result<DVector<f64>, RunError> {
    let (slack, injections) =
        crate::dsse::measured_powerflow_inputs(model, meters, series, ts, quality)?;
    let solution = solve_powerflow(model, &injections, &slack, &PowerFlowOptions::default())?;
    Ok(solution.state.voltages_pu.map(|u| u.norm()))
}

/// Score the configured export-limit schemes against the measured solar
/// output and write per-scheme traces plus a benefit summary.
pub fn cmd_export_limit(cfg: &RunConfig) -> Result<Vec<PathBuf>, RunError> {
    cfg.validate()?;
    cfg.prepare_outdir()?;
    let model = cfg.load_network()?;
    let meters = cfg.load_meters()?;
    let series = cfg.load_series()?;
    let quality = screen_quality(&series, &QualityOptions::default());
    let schemes = cfg.export_schemes()?;

    if cfg.export.injection_bus.is_empty() {
        return Err(RunError::Config("export.injection_bus is not set".into()));
    }
    if model.bus_idx(&cfg.export.injection_bus).is_none() {
        return Err(RunError::Config(format!(
            "export.injection_bus {:?} is not in the network",
            cfg.export.injection_bus
        )));
    }
    if cfg.export.solar_meter.is_empty() {
        return Err(RunError::Config("export.solar_meter is not set".into()));
    }
    if !meters.iter().any(|m| m.meter_id == cfg.export.solar_meter) {
        return Err(RunError::Config(format!(
            "export.solar_meter {:?} has no specification",
            cfg.export.solar_meter
        )));
    }
    if !(cfg.export.capacity_mw > 0.0) {
        return Err(RunError::Config(format!(
            "export.capacity_mw {} must be positive",
            cfg.export.capacity_mw
        )));
    }

    let stamps = strided_timestamps(&series, cfg.stride);
    if stamps.len() < 2 {
        return Err(RunError::Config(
            "export analysis needs at least two strided timestamps".into(),
        ));
    }
    let cadence_s = (stamps[1] - stamps[0]).num_seconds() as f64;
    for pair in stamps.windows(2) {
        if (pair[1] - pair[0]).num_seconds() as f64 != cadence_s {
            return Err(RunError::Config(
                "export analysis needs a uniform measurement cadence".into(),
            ));
        }
    }

    let pool = cfg.pool()?;
    let per_stamp: Result<Vec<(DVector<f64>, f64)>, RunError> = pool.install(|| {
        stamps
            .par_iter()
            .map(|&ts| {
                let v = measured_voltages(&model, &meters, &series, ts, &quality)?;
                let row = series.row(ts, &cfg.export.solar_meter).ok_or_else(|| {
                    RunError::Config(format!(
                        "meter {} has no row at {}",
                        cfg.export.solar_meter,
                        stamp(ts)
                    ))
                })?;
                let usable = |channel: Channel| -> Option<f64> {
                    if quality.sample_suspect(&cfg.export.solar_meter, channel, ts) {
                        None
                    } else {
                        row.value(channel)
                    }
                };
                let solar_w = usable(Channel::ActiveTotal).ok_or_else(|| {
                    RunError::Config(format!(
                        "meter {} has no usable output reading at {}",
                        cfg.export.solar_meter,
                        stamp(ts)
                    ))
                })?;
                Ok((v, solar_w / 1e6))
            })
            .collect()
    });
    let per_stamp = per_stamp?;
    let v_twin_steps: Vec<DVector<f64>> = per_stamp.iter().map(|(v, _)| v.clone()).collect();
    let measured_mw: Vec<f64> = per_stamp.iter().map(|&(_, p)| p).collect();

    let reference: Vec<f64> = stamps
        .iter()
        .map(|&ts| solar_factor(hour_of(ts), cfg.synth.sunrise_h, cfg.synth.sunset_h))
        .collect();
    let offset = match cfg.export.offset_mw {
        Some(mw) => CurtailmentOffset::Fixed(mw),
        None => CurtailmentOffset::FitBelow {
            uncurtailed_mw: cfg
                .export
                .uncurtailed_mw
                .unwrap_or(0.9 * cfg.export.capacity_mw),
        },
    };
    let curtailment =
        estimate_curtailment(&measured_mw, &reference, cfg.export.capacity_mw, offset)?;

    // Linearize around the first strided operating point.
    let (first_slack, first_injections) =
        crate::dsse::measured_powerflow_inputs(&model, &meters, &series, stamps[0], &quality)?;
    let base = solve_powerflow(
        &model,
        &first_injections,
        &first_slack,
        &PowerFlowOptions::default(),
    )?;
    let sens = linearize(&model, &base, &cfg.export.injection_bus)?;

    let report = scheme_benefit(
        &model,
        &sens,
        &curtailment,
        &v_twin_steps,
        &schemes,
        cfg.export.upper_limit_pu,
        cfg.export.price_usd_per_mwh,
        cfg.export.co2_kg_per_mwh,
        cadence_s,
    )?;

    let mut written = Vec::new();
    for row in &report.rows {
        let mut trace = Vec::with_capacity(stamps.len());
        for (k, &ts) in stamps.iter().enumerate() {
            trace.push(vec![
                stamp(ts),
                format!("{:.6}", curtailment.samples[k].curtailment_mw),
                format!("{:.6}", row.limit_mw[k]),
                format!("{:.6}", row.recovered_mw[k]),
            ]);
        }
        let path = cfg
            .outdir
            .join(format!("scheme_{}.csv", row.scheme.label()));
        write_csv(
            &path,
            &["timestamp", "curtailment_mw", "limit_mw", "recovered_mw"],
            &trace,
        )?;
        written.push(path);
    }

    let summary: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|row| {
            vec![
                row.scheme.label(),
                format!("{:.6}", row.recovered_mwh),
                format!("{:.2}", row.revenue_usd),
                format!("{:.6}", row.avoided_co2_t),
            ]
        })
        .collect();
    let summary_path = cfg.outdir.join("benefit_summary.csv");
    write_csv(
        &summary_path,
        &["scheme", "recovered_mwh", "revenue_usd", "avoided_co2_t"],
        &summary,
    )?;
    written.push(summary_path);
    Ok(written)
}

/// Recover transformer tap positions from the measurement history and
/// write the corrected network plus a correction report.
pub fn cmd_tap_sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>, RunError> {
    cfg.validate()?;
    cfg.prepare_outdir()?;
    let network_text = read_file(&cfg.network)?;
    let model = parse_network(&network_text)?;
    let meters = cfg.load_meters()?;
    let series = cfg.load_series()?;
    let quality = screen_quality(&series, &QualityOptions::default());
    let stamps = strided_timestamps(&series, cfg.stride);
    let subset = if cfg.tap_sweep.transformers.is_empty() {
        None
    } else {
        Some(cfg.tap_sweep.transformers.as_slice())
    };
    let (_, report) = correct_taps(&model, subset, &meters, &series, &stamps, &quality)?;

    let rows: Vec<Vec<String>> = report
        .corrections
        .iter()
        .map(|c| {
            vec![
                c.transformer_id.clone(),
                c.recorded_position.to_string(),
                c.corrected_position.to_string(),
                format!("{:.6e}", report.before_rms_pu),
                format!("{:.6e}", report.after_rms_pu),
                report.passes.to_string(),
            ]
        })
        .collect();
    let report_path = cfg.outdir.join("tap_report.csv");
    write_csv(
        &report_path,
        &[
            "transformer",
            "recorded_position",
            "corrected_position",
            "before_rms_pu",
            "after_rms_pu",
            "passes",
        ],
        &rows,
    )?;

    let corrected_json = patch_tap_positions(&network_text, &report.corrections)?;
    let network_path = cfg.outdir.join("network_corrected.json");
    write_file(&network_path, &corrected_json)?;
    Ok(vec![report_path, network_path])
}

/// Rewrite tap positions inside the original network document, leaving
/// everything else as the author wrote it.
fn patch_tap_positions(
    network_text: &str,
    corrections: &[crate::dsse::TapCorrection],
) -> Result<String, RunError> {
    let mut doc: serde_json::Value = serde_json::from_str(network_text)
        .map_err(|err| RunError::Config(format!("network file is not valid JSON: {err}")))?;
    let transformers = doc
        .get_mut("transformers")
        .and_then(|t| t.as_array_mut())
        .ok_or_else(|| RunError::Config("network file has no transformers array".into()))?;
    for correction in corrections {
        if correction.corrected_position == correction.recorded_position {
            continue;
        }
        let entry = transformers
            .iter_mut()
            .find(|t| t.get("id").and_then(|v| v.as_str()) == Some(&correction.transformer_id))
            .ok_or_else(|| {
                RunError::Config(format!(
                    "transformer {:?} is not in the network file",
                    correction.transformer_id
                ))
            })?;
        let tap = entry
            .get_mut("tap")
            .and_then(|t| t.as_object_mut())
            .ok_or_else(|| {
                RunError::Config(format!(
                    "transformer {:?} has no tap block to correct",
                    correction.transformer_id
                ))
            })?;
        tap.insert(
            "position".to_string(),
            serde_json::Value::from(correction.corrected_position),
        );
    }
    serde_json::to_string_pretty(&doc)
        .map_err(|err| RunError::Config(format!("cannot serialize corrected network: {err}")))
}


#[cfg(test)]
mod probe {
    use super::*;
    use crate::dsse::measurement::EvalContext;
    use crate::dsse::{assemble_measurements, AssembleOptions};
    use crate::netmodel::build_admittance;
    use crate::telemetry::{screen_quality, QualityOptions};
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn twin33_jacobian_matches_finite_differences() {
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
        let model = parse_network(&fs::read_to_string(format!("{root}/data/twin33.json")).unwrap()).unwrap();
        let meters = load_meter_specs(&fs::read_to_string(format!("{root}/data/twin33_meters.json")).unwrap()).unwrap();
        let file = fs::File::open(format!("{root}/out/twin33/measurements.csv")).unwrap();
        let series = read_measurements_csv(file).unwrap();
        let quality = screen_quality(&series, &QualityOptions::default());
        let ts = strided_timestamps(&series, 4)[36];
        let equations = assemble_measurements(&model, &meters, &series, ts, &quality, &AssembleOptions::default()).unwrap();

        let index = model.node_index();
        let ybus = build_admittance(&model).unwrap().ybus(&model, &index);
        let solution = solve_powerflow(&model, &InjectionSet::from_model(&model), &SlackSpec::balanced(1.0), &PowerFlowOptions::default()).unwrap();
        let u0 = solution.state.voltages_pu.clone();
        let n = u0.len();

        let eval_all = |u: &DVector<Complex64>| -> DVector<f64> {
            let i = &ybus * u;
            let ctx = EvalContext { ybus: &ybus, u, i: &i };
            DVector::from_iterator(equations.len(), equations.iter().map(|eq| eq.kind.evaluate(&ctx)))
        };

        let i0 = &ybus * &u0;
        let ctx = EvalContext { ybus: &ybus, u: &u0, i: &i0 };
        let mut jac = DMatrix::zeros(equations.len(), 2 * n);
        let mut row = vec![0.0; 2 * n];
        for (r, eq) in equations.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            eq.kind.fill_jacobian_row(&ctx, &mut row);
            for (c, v) in row.iter().enumerate() {
                jac[(r, c)] = *v;
            }
        }

        let step = 1e-6;
        let mut worst = (0.0f64, 0usize, 0usize);
        for c in 0..2 * n {
            let delta = if c < n { Complex64::new(step, 0.0) } else { Complex64::new(0.0, step) };
            let k = if c < n { c } else { c - n };
            let mut up = u0.clone();
            up[k] += delta;
            let mut dn = u0.clone();
            dn[k] -= delta;
            let h_up = eval_all(&up);
            let h_dn = eval_all(&dn);
            for r in 0..equations.len() {
                let fd = (h_up[r] - h_dn[r]) / (2.0 * step);
                let diff = (fd - jac[(r, c)]).abs();
                let scale = fd.abs().max(jac[(r, c)].abs()).max(1.0);
                if diff / scale > worst.0 {
                    worst = (diff / scale, r, c);
                }
            }
        }
        let (w, r, c) = worst;
        println!("worst relative jacobian mismatch {w:.3e} at row {} ({}) col {}", r, equations[r].source, c);
        let (bus_idx, phase) = index.node(if c < n { c } else { c - n });
        println!("column is {} part of bus {} phase {}", if c < n { "real" } else { "imag" }, model.buses[bus_idx].id, phase.label());
        assert!(w < 1e-4);
    }

    #[test]
    fn twin33_single_stamp_trace() {
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
        let model = parse_network(&fs::read_to_string(format!("{root}/data/twin33.json")).unwrap()).unwrap();
        let meters = load_meter_specs(&fs::read_to_string(format!("{root}/data/twin33_meters.json")).unwrap()).unwrap();
        let file = fs::File::open(format!("{root}/out/twin33/measurements.csv")).unwrap();
        let series = read_measurements_csv(file).unwrap();
        let quality = screen_quality(&series, &QualityOptions::default());
        let ts = strided_timestamps(&series, 4)[12];
        println!("stamp {}", stamp(ts));
        let equations = assemble_measurements(&model, &meters, &series, ts, &quality, &AssembleOptions::default()).unwrap();
        let options = crate::dsse::EstimatorOptions::default();
        match crate::dsse::estimate_state(&model, &equations, &options) {
            Ok(est) => println!("converged in {} iterations, objective {:.3e}", est.iterations, est.objective),
            Err(err) => println!("failed: {err}"),
        }
    }

    #[test]
    fn twin33_estimates_every_strided_stamp() {
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
        let model = parse_network(&fs::read_to_string(format!("{root}/data/twin33.json")).unwrap()).unwrap();
        let meters = load_meter_specs(&fs::read_to_string(format!("{root}/data/twin33_meters.json")).unwrap()).unwrap();
        let file = fs::File::open(format!("{root}/out/twin33/measurements.csv")).unwrap();
        let series = read_measurements_csv(file).unwrap();
        let quality = screen_quality(&series, &QualityOptions::default());
        let stamps = strided_timestamps(&series, 4);
        let options = crate::dsse::EstimatorOptions::default();
        let mut failures = 0usize;
        let mut max_iters = 0usize;
        for ts in &stamps {
            let equations = assemble_measurements(&model, &meters, &series, *ts, &quality, &AssembleOptions::default()).unwrap();
            match crate::dsse::estimate_state(&model, &equations, &options) {
                Ok(est) => {
                    max_iters = max_iters.max(est.iterations);
                }
                Err(err) => {
                    failures += 1;
                    println!("{}: {err}", stamp(*ts));
                }
            }
        }
        println!("{} stamps, {failures} failures, max iterations {max_iters}", stamps.len());
        assert_eq!(failures, 0);
    }
}
