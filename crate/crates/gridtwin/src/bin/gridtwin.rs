use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use gridtwin::run::{
    cmd_dsse, cmd_export_limit, cmd_powerflow, cmd_quality, cmd_synth, cmd_tap_sweep, RunConfig,
    RunError,
};

/// Digital twin toolkit for three-phase distribution networks.
#[derive(Parser)]
#[command(name = "gridtwin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network description (JSON)
    #[arg(long)]
    network: Option<PathBuf>,
    /// Meter specifications (JSON)
    #[arg(long)]
    meters: Option<PathBuf>,
    /// Measurement CSV
    #[arg(long)]
    measurements: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Base random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Process every n-th timestamp
    #[arg(long)]
    stride: Option<usize>,
    /// Worker threads (0 = automatic)
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(network) = &self.network {
            cfg.network = network.clone();
        }
        if let Some(meters) = &self.meters {
            cfg.meters = meters.clone();
        }
        if let Some(measurements) = &self.measurements {
            cfg.measurements = measurements.clone();
        }
        if let Some(outdir) = &self.outdir {
            cfg.outdir = outdir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(stride) = self.stride {
            cfg.stride = stride;
        }
        if let Some(jobs) = self.jobs {
            cfg.jobs = jobs;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the network power flow at its nameplate loading
    Powerflow(Common),
    /// Generate a synthetic day of meter readings
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of timesteps
        #[arg(long)]
        steps: Option<usize>,
        /// Meter noise multiplier (0 = exact readings)
        #[arg(long)]
        noise_scale: Option<f64>,
        /// Curtail total generation above this many MW
        #[arg(long)]
        export_cap_mw: Option<f64>,
    },
    /// Screen measurements for stuck, stepped, gross, and missing readings
    Quality(Common),
    /// Estimate bus voltages from the measurement history
    Dsse(Common),
    /// Score export limitation schemes against measured generation
    ExportLimit {
        #[command(flatten)]
        common: Common,
        /// Bus whose export the schemes govern
        #[arg(long)]
        bus: Option<String>,
        /// Meter measuring the generator output
        #[arg(long)]
        solar_meter: Option<String>,
        /// Installed generation capacity, MW
        #[arg(long)]
        capacity_mw: Option<f64>,
        /// Scheme to score (repeatable): unity, q_control:<pf>, conservative:<pct>
        #[arg(long = "scheme")]
        schemes: Vec<String>,
        /// Energy price, $/MWh
        #[arg(long)]
        price: Option<f64>,
        /// Grid carbon intensity, kgCO2e/MWh
        #[arg(long)]
        carbon: Option<f64>,
    },
    /// Recover transformer tap positions from the measurement history
    TapSweep {
        #[command(flatten)]
        common: Common,
        /// Transformer to correct (repeatable, default all)
        #[arg(long = "transformer")]
        transformers: Vec<String>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<Vec<PathBuf>> {
    let written = match cli.command {
        Command::Powerflow(common) => cmd_powerflow(&common.resolve()?)?,
        Command::Synth {
            common,
            steps,
            noise_scale,
            export_cap_mw,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(steps) = steps {
                cfg.synth.steps = steps;
            }
            if let Some(noise_scale) = noise_scale {
                cfg.synth.noise_scale = noise_scale;
            }
            if export_cap_mw.is_some() {
                cfg.synth.export_cap_mw = export_cap_mw;
            }
            cmd_synth(&cfg)?
        }
        Command::Quality(common) => cmd_quality(&common.resolve()?)?,
        Command::Dsse(common) => cmd_dsse(&common.resolve()?)?,
        Command::ExportLimit {
            common,
            bus,
            solar_meter,
            capacity_mw,
            schemes,
            price,
            carbon,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(bus) = bus {
                cfg.export.injection_bus = bus;
            }
            if let Some(solar_meter) = solar_meter {
                cfg.export.solar_meter = solar_meter;
            }
            if let Some(capacity_mw) = capacity_mw {
                cfg.export.capacity_mw = capacity_mw;
            }
            if !schemes.is_empty() {
                cfg.export.schemes = schemes;
            }
            if let Some(price) = price {
                cfg.export.price_usd_per_mwh = price;
            }
            if let Some(carbon) = carbon {
                cfg.export.co2_kg_per_mwh = carbon;
            }
            cmd_export_limit(&cfg)?
        }
        Command::TapSweep {
            common,
            transformers,
        } => {
            let mut cfg = common.resolve()?;
            if !transformers.is_empty() {
                cfg.tap_sweep.transformers = transformers;
            }
            cmd_tap_sweep(&cfg)?
        }
    };
    Ok(written)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(written) => {
            for path in written {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            let run_err = err.downcast_ref::<RunError>();
            if let Some(detail) = run_err.and_then(RunError::diagnostic) {
                eprintln!("{detail}");
            }
            let code = run_err.map_or(1, RunError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
