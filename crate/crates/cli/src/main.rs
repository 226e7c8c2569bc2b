use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rnsim::config::{validate_config, PipelineConfig, Stage};
use rnsim::io::{self, CodecCheckpoint, PhysicalCheckpoint, RiskNeutralCheckpoint, SCHEMA_VERSION};
use rnsim::pipeline::stages::{self, historical_codes};
use rnsim::pipeline::{simulate, FlowSampler, MarketSeries};

/// Risk-neutral spot and option market simulator.
#[derive(Debug, Parser)]
#[command(name = "rnsim", version)]
struct Cli {
    /// JSON pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for data, checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic market CSV.
    Synth,
    /// Train the codec and the physical simulator.
    FitPhysical,
    /// Build the reweighted dataset on every historical state.
    RemoveDrift,
    /// Train the risk-neutral simulator on the reweighted dataset.
    FitRn,
    /// Drift tables, optimal trades and densities at evaluation states.
    Evaluate,
    /// Simulate paths from the last historical state.
    Simulate {
        #[arg(long, value_enum, default_value_t = Model::RiskNeutral)]
        model: Model,
    },
    /// Every stage in sequence.
    Run,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Model {
    Physical,
    RiskNeutral,
}

const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_CONVERGENCE: u8 = 5;
const EXIT_IO: u8 = 6;

fn exit_code(err: &anyhow::Error) -> u8 {
    use rnsim::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::InvalidGrid(_) => EXIT_CONFIG,
                E::NoConvergence { .. } | E::TooManySkipped { .. } | E::Diverged { .. } | E::Solver(_) => EXIT_CONVERGENCE,
                E::Io(_) | E::Checkpoint(_) | E::Json(_) => EXIT_IO,
                E::Csv(c) if c.is_io_error() => EXIT_IO,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Info })
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut config = validate_config(&text)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

fn market_path(config: &PipelineConfig, out: &Path) -> PathBuf {
    config.paths.market.clone().unwrap_or_else(|| out.join(io::MARKET_CSV))
}

fn load_market(config: &PipelineConfig, out: &Path) -> Result<MarketSeries> {
    let path = market_path(config, out);
    io::load_market_csv(&path, &config.spec()).with_context(|| format!("loading {}", path.display()))
}

fn checkpoint<T: io::Versioned>(out: &Path, name: &str) -> Result<T> {
    let path = out.join(name);
    io::read_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_json(&out.join("config.json"), &config)?;
    match &cli.command {
        Command::Synth => synth(&config, out),
        Command::FitPhysical => fit_physical(&config, out),
        Command::RemoveDrift => remove_drift(&config, out),
        Command::FitRn => fit_rn(&config, out),
        Command::Evaluate => evaluate(&config, out),
        Command::Simulate { model } => run_simulation(&config, out, *model),
        Command::Run => {
            if config.paths.market.is_none() {
                synth(&config, out)?;
            }
            fit_physical(&config, out)?;
            remove_drift(&config, out)?;
            fit_rn(&config, out)?;
            evaluate(&config, out)
        }
    }
}

fn synth(config: &PipelineConfig, out: &Path) -> Result<()> {
    let series = stages::synthetic_series(config)?;
    let path = out.join(io::MARKET_CSV);
    io::write_market_csv(&path, &series)?;
    log::info!("wrote {} days to {}", series.len(), path.display());
    Ok(())
}

fn fit_physical(config: &PipelineConfig, out: &Path) -> Result<()> {
    let series = load_market(config, out)?;
    let (codec, report) = stages::codec_stage(&series, config)?;
    io::update_training_curves(&out.join(io::TRAINING_CURVES_CSV), "codec", &report)?;
    let fit = stages::physical_stage(&series, &codec, config)?;
    io::update_training_curves(&out.join(io::TRAINING_CURVES_CSV), "physical", &fit.report)?;
    io::write_json(
        &out.join(io::CODEC_JSON),
        &CodecCheckpoint {
            schema_version: SCHEMA_VERSION,
            codec,
            report,
        },
    )?;
    io::write_json(
        &out.join(io::PHYSICAL_JSON),
        &PhysicalCheckpoint {
            schema_version: SCHEMA_VERSION,
            model: fit.model,
            report: fit.report,
            heldout_nll: fit.heldout_nll,
            baseline_nll: fit.baseline_nll,
        },
    )?;
    Ok(())
}

fn remove_drift(config: &PipelineConfig, out: &Path) -> Result<()> {
    let series = load_market(config, out)?;
    let codec: CodecCheckpoint = checkpoint(out, io::CODEC_JSON)?;
    let physical: PhysicalCheckpoint = checkpoint(out, io::PHYSICAL_JSON)?;
    let codes = historical_codes(&series, &codec.codec)?;
    let dr = stages::drift_removal_stage(&physical.model, &codec.codec, series.spec(), codes.view(), config)?;
    io::emit_drift_removal(out, &dr, config.drift_removal.lambda.get(), config.drift_removal.samples_per_condition)?;
    Ok(())
}

fn fit_rn(config: &PipelineConfig, out: &Path) -> Result<()> {
    let physical: PhysicalCheckpoint = checkpoint(out, io::PHYSICAL_JSON)?;
    let path = out.join(io::DATASET_CSV);
    let data = io::read_dataset_csv(&path).with_context(|| format!("loading {}", path.display()))?;
    let (model, report) = stages::risk_neutral_stage(&physical.model, &data, config)?;
    io::update_training_curves(&out.join(io::TRAINING_CURVES_CSV), "risk_neutral", &report)?;
    io::write_json(
        &out.join(io::RISK_NEUTRAL_JSON),
        &RiskNeutralCheckpoint {
            schema_version: SCHEMA_VERSION,
            model,
            report,
        },
    )?;
    Ok(())
}

fn evaluate(config: &PipelineConfig, out: &Path) -> Result<()> {
    let series = load_market(config, out)?;
    let codec: CodecCheckpoint = checkpoint(out, io::CODEC_JSON)?;
    let physical: PhysicalCheckpoint = checkpoint(out, io::PHYSICAL_JSON)?;
    let rn: RiskNeutralCheckpoint = checkpoint(out, io::RISK_NEUTRAL_JSON)?;
    let codes = historical_codes(&series, &codec.codec)?;
    let ev = stages::evaluation_stage(&physical.model, &rn.model, &codec.codec, series.spec(), codes.view(), config)?;
    for r in &ev.drift {
        for i in &r.instruments {
            log::info!(
                "{}: P {:.4}% Q {:.4}% ratio {}",
                i.instrument,
                i.p_drift_pct,
                i.q_drift_pct,
                i.ratio.map_or("-".to_string(), |v| format!("{v:.1}"))
            );
        }
    }
    io::emit_evaluation(out, &ev, config.drift_removal.lambda.get(), config.evaluation.samples)?;
    Ok(())
}

fn run_simulation(config: &PipelineConfig, out: &Path, model: Model) -> Result<()> {
    let series = load_market(config, out)?;
    let codec: CodecCheckpoint = checkpoint(out, io::CODEC_JSON)?;
    let flow = match model {
        Model::Physical => checkpoint::<PhysicalCheckpoint>(out, io::PHYSICAL_JSON)?.model,
        Model::RiskNeutral => checkpoint::<RiskNeutralCheckpoint>(out, io::RISK_NEUTRAL_JSON)?.model,
    };
    let start = series.state(series.len() - 1)?;
    let sim = &config.simulation;
    let paths = simulate(
        &FlowSampler(&flow),
        &codec.codec,
        &start,
        sim.horizon,
        sim.paths,
        Some(flow.condition_bounds()),
        config.stage_seed(Stage::Simulation),
    )?;
    io::write_simulation_csv(&out.join(io::SIMULATION_CSV), &paths)?;
    Ok(())
}
