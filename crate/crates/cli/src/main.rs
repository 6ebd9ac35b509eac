// SPDX-License-Identifier: MIT OR Apache-2.0

//! `aulab`: run the artificial-uncertainty pipeline stage by stage or end to end.
//!
//! Exit status is 0 on success, 2 when a stage is missing an artifact from an
//! earlier stage, and 1 for anything else (including usage errors).

use std::path::PathBuf;
use std::process::ExitCode;

use aulab::harness::{self, ExperimentConfig, Run, BASE_TAG};
use aulab::probe::Position;
use aulab::taskgen::Split;
use aulab::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "aulab", version, about = "Artificial-uncertainty probe laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON). Defaults to the built-in reference config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Re-derive every seed in the config from this one.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Method tag, e.g. `base`, `grad-ascent@0.02`, `dropout-attn@0.14`.
    #[arg(long, global = true)]
    method: Option<String>,

    /// Split name, e.g. `easy_val` or `hard_test`.
    #[arg(long, global = true)]
    split: Option<String>,

    /// Probe position.
    #[arg(long, global = true, value_parser = ["pre", "post"])]
    position: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write every dataset split.
    Gen,
    /// Train the base model.
    Train,
    /// Build a modified model (all table methods without --method).
    Forge,
    /// Extract hidden-state records.
    Extract,
    /// Fit probes on a model's easy_cal records.
    Probe,
    /// Sweep the dropout grid and pick the max-variance rate.
    Select,
    /// Score a probe on base-model records.
    Eval,
    /// Aggregate reports into table.csv and agreement.csv.
    Table,
    /// Every stage in order, resuming from existing artifacts.
    RunAll,
    /// Print the effective config as JSON.
    Config,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => harness::io::read_json(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    Ok(config)
}

fn positions(cli: &Cli, run: &Run) -> Result<Vec<Position>> {
    match &cli.position {
        Some(p) => Ok(vec![Position::parse(p)?]),
        None => Ok(run.config.positions.clone()),
    }
}

fn splits(cli: &Cli, default: Vec<Split>) -> Result<Vec<Split>> {
    match &cli.split {
        Some(s) => Ok(vec![Split::parse(s)?]),
        None => Ok(default),
    }
}

fn method(cli: &Cli) -> &str {
    cli.method.as_deref().unwrap_or(BASE_TAG)
}

fn execute(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    if let Command::Config = cli.command {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let run = Run::new(config, &cli.out)?;
    let c = &run.config;
    match cli.command {
        Command::Gen => harness::cmd_gen(&run),
        Command::Train => harness::cmd_train(&run),
        Command::Forge => {
            let tags = match &cli.method {
                Some(t) => vec![t.clone()],
                None => harness::table_methods(&run)?
                    .into_iter()
                    .map(|m| m.tag)
                    .filter(|t| t != BASE_TAG)
                    .collect(),
            };
            tags.iter().try_for_each(|t| harness::cmd_forge(&run, t))
        }
        Command::Extract => {
            let tag = method(cli);
            let mut default = vec![Split::EasyCal];
            default.extend(&c.eval_splits);
            if tag == BASE_TAG {
                default.extend([c.variance_split, Split::HardVal]);
                default.sort();
                default.dedup();
            }
            let pos = cli.position.as_deref().map(Position::parse).transpose()?;
            splits(cli, default)?
                .into_iter()
                .try_for_each(|s| harness::cmd_extract(&run, tag, s, pos))
        }
        Command::Probe => positions(cli, &run)?
            .into_iter()
            .try_for_each(|p| harness::cmd_probe(&run, method(cli), p)),
        Command::Select => {
            let sel = harness::cmd_select(&run)?;
            println!(
                "selected {} (variance {:.6}, position {})",
                sel.tag, sel.variance, sel.position
            );
            Ok(())
        }
        Command::Eval => {
            for s in splits(cli, c.eval_splits.clone())? {
                for p in positions(cli, &run)? {
                    let r = harness::cmd_eval(&run, method(cli), s, p)?;
                    println!(
                        "{} {s} {p}: brier {:.4} ece {:.4} auroc {} acc {:.4}",
                        method(cli),
                        r.brier,
                        r.ece,
                        r.auroc.map_or("n/a".into(), |a| format!("{a:.4}")),
                        r.accuracy
                    );
                }
            }
            Ok(())
        }
        Command::Table => {
            harness::cmd_table(&run)?;
            let path = run.layout.table();
            print!(
                "{}",
                std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?
            );
            Ok(())
        }
        Command::RunAll => {
            let m = harness::run_all(&run)?;
            let total: f64 = m.timing.values().sum();
            println!(
                "{} artifacts in {} ({total:.1}s)",
                m.artifacts.len(),
                run.layout.root().display()
            );
            Ok(())
        }
        Command::Config => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_dependency() { 2 } else { 1 })
        }
    }
}
