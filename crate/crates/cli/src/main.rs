//! `sdg-lab`: batch experiment driver. One task per invocation, outputs
//! written atomically, exit 0 on pass, 2 on assertion failure, 1 on error.

mod config;
mod output;
mod tasks;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use output::{config_hash, emit_plotdata, write_csv, write_json, Meta, PlotKind};
use sdg_core::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tasks::{run_task, TaskResult};

#[derive(Parser)]
#[command(name = "sdg-lab", version, about = "Stochastic differential game laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the task described by a config file.
    Run {
        config: PathBuf,
        /// Cap the worker count (results do not depend on it).
        #[arg(long)]
        threads: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and range-check a config file without running it.
    Validate { config: PathBuf },
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, String), Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse(&text)?;
    cfg.validate()?;
    Ok((cfg, text))
}

fn run(config_path: &Path, threads: Option<usize>, out_dir: Option<PathBuf>) -> Result<i32, Error> {
    if let Some(n) = threads {
        // ignore failures: the pool may already exist in-process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let (config, text) = load_config(config_path)?;
    let (seed, seed_source) = match std::env::var("SDG_LAB_SEED") {
        Ok(v) => (
            v.parse::<u64>().map_err(|_| Error::ConfigInvalid {
                field: "SDG_LAB_SEED".into(),
                message: "must be an unsigned integer".into(),
            })?,
            "env",
        ),
        Err(_) => (config.grid.seed, "config"),
    };
    let meta = Meta {
        seed,
        seed_source,
        config_sha: config_hash(&text),
    };
    let dir = out_dir
        .or_else(|| config.output.dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let wants = |fmt: &str| -> bool {
        config
            .output
            .formats
            .as_ref()
            .map_or(true, |fs| fs.iter().any(|f| f == fmt))
    };

    let (result, pass, summary) = run_task(&config, seed)?;
    match &result {
        TaskResult::Validate { report } => {
            if wants("json") {
                let value = serde_json::to_value(report)
                    .map_err(|e| Error::Io(format!("encode: {e}")))?;
                write_json(
                    &dir.join("validate_report.json"),
                    serde_json::json!({ "report": value, "pass": pass }),
                    &meta,
                )?;
            }
        }
        TaskResult::Bsde { y0, std_err } => {
            if wants("json") {
                write_json(
                    &dir.join("bsde.json"),
                    serde_json::json!({ "y0": y0, "std_err": std_err }),
                    &meta,
                )?;
            }
        }
        TaskResult::Value { .. } => {
            if wants("csv") {
                write_csv(
                    &dir.join("value.csv"),
                    &emit_plotdata(&result, PlotKind::ValueVsX)?,
                    &meta,
                )?;
            }
        }
        TaskResult::Dpp { reports } => {
            if wants("json") {
                let value = serde_json::to_value(
                    reports
                        .iter()
                        .map(|(w, r)| (w.clone(), r.clone()))
                        .collect::<std::collections::BTreeMap<_, _>>(),
                )
                .map_err(|e| Error::Io(format!("encode: {e}")))?;
                write_json(
                    &dir.join("dpp_report.json"),
                    serde_json::json!({ "checks": value, "pass": pass }),
                    &meta,
                )?;
            }
            if wants("csv") {
                write_csv(
                    &dir.join("dpp_bracket.csv"),
                    &emit_plotdata(&result, PlotKind::DppBracket)?,
                    &meta,
                )?;
            }
        }
        TaskResult::Hamiltonian { .. } => {
            if wants("csv") {
                write_csv(
                    &dir.join("envelope_vs_n.csv"),
                    &emit_plotdata(&result, PlotKind::EnvelopeVsN)?,
                    &meta,
                )?;
            }
        }
        TaskResult::Pde { .. } => {
            if wants("csv") {
                write_csv(
                    &dir.join("pde_surface.csv"),
                    &emit_plotdata(&result, PlotKind::PdeSurface)?,
                    &meta,
                )?;
            }
        }
        TaskResult::Crossval { report } => {
            if wants("json") {
                let value = serde_json::to_value(report)
                    .map_err(|e| Error::Io(format!("encode: {e}")))?;
                write_json(&dir.join("crossval.json"), value, &meta)?;
            }
        }
    }
    println!("{summary} -> {}", dir.display());
    Ok(if pass { 0 } else { 2 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            threads,
            out,
        } => run(&config, threads, out),
        Command::Validate { config } => load_config(&config).map(|_| {
            println!("config OK");
            0
        }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
