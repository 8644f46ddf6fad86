use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use romcal::pipeline::{self, PipelineConfig};
use romcal::Error;

/// Non-intrusive reduced models for the 1D reactor: generate snapshots,
/// train (POD, DEIM, operator inference, calibration), evaluate, export.
#[derive(Debug, Parser)]
#[command(name = "romcal", version)]
struct Cli {
    /// Pipeline configuration (`key = value` lines). Every key can also be
    /// set through a `ROMCAL_<KEY>` environment variable.
    #[arg(long, global = true, env = "ROMCAL_CONFIG")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "romcal-out", env = "ROMCAL_OUT")]
    out: PathBuf,

    /// Recorded in outputs; the pipeline itself draws no random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Train the inference-only model and stop before calibration.
    #[arg(long, global = true)]
    skip_calibration: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the full model for every training and validation heat load.
    Generate,
    /// Fit the reduced models from the training snapshots.
    Train,
    /// Error curves, field statistics and summary for every model and case.
    Evaluate,
    /// Write the trained model without its basis.
    ExportRom {
        /// Destination file (default: <out>/rom_export.rom).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Load the bundled reference model (or `--model`), check it and
    /// simulate the heating scenario.
    FixtureCheck {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        Error::Dimension(_) | Error::Io { .. } => EXIT_DATA,
        Error::Numeric(_) | Error::Domain(_) => EXIT_NUMERIC,
    }
}

fn run(cli: &Cli) -> Result<bool, (&'static str, Error)> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref()).map_err(|e| ("config", e))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = &cli.out;
    match &cli.command {
        Command::Generate => {
            let files = pipeline::cmd_generate(&cfg, out).map_err(|e| ("generate", e))?;
            println!(
                "wrote {} snapshot files to {}",
                files.len(),
                out.join("snapshots").display()
            );
        }
        Command::Train => {
            let trained = pipeline::cmd_train(&cfg, out, cli.skip_calibration).map_err(|e| ("train", e))?;
            println!("wrote {}", out.join(pipeline::OI_MODEL_FILE).display());
            if let Some(report) = &trained.convergence {
                let last = report.history.last().expect("history holds the initial point");
                println!(
                    "calibration: {} iterations ({:?}), objective {:.6e} -> {:.6e}",
                    report.iterations, report.termination, report.history[0].objective, last.objective
                );
                println!("wrote {}", out.join(pipeline::CALIBRATED_MODEL_FILE).display());
            }
        }
        Command::Evaluate => {
            let summary = pipeline::cmd_evaluate(&cfg, out).map_err(|e| ("evaluate", e))?;
            for (name, _, _, mean) in &summary.models {
                println!("{name}: mean relative MSE (switch-off window excluded) {mean:.6e}");
            }
            if let Some(r) = summary.ratio {
                println!("calibrated / oi ratio {r:.6e}");
            }
        }
        Command::ExportRom { output } => {
            let dest = output.clone().unwrap_or_else(|| out.join("rom_export.rom"));
            pipeline::cmd_export(out, &dest).map_err(|e| ("export-rom", e))?;
            println!("wrote {}", dest.display());
        }
        Command::FixtureCheck { model } => {
            let report = pipeline::cmd_fixture_check(model.as_deref(), &cfg).map_err(|e| ("fixture-check", e))?;
            println!(
                "shapes A {:?}, P1 {:?}, P2 {:?}",
                report.shapes[0], report.shapes[1], report.shapes[2]
            );
            for (label, got, want) in &report.spot_checks {
                println!("{label} = {got:e} (expected {want:e})");
            }
            println!(
                "{} steps, all finite: {}, max |s| {:.4e}, sampled temperature range [{:.3}, {:.3}] K",
                report.steps,
                report.all_finite,
                report.max_abs_state,
                report.min_sample_temperature,
                report.max_sample_temperature
            );
            let ok = report.passed();
            println!("fixture check {}", if ok { "passed" } else { "FAILED" });
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERIC),
        Err((stage, e)) => {
            error!("{stage} failed: {e}");
            eprintln!("romcal {stage}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
