//! Command-line front end for the re-identification pipeline.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::rank_table_text;
use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "reid", version, about = "Person re-identification with Siamese networks")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides a configuration key, e.g. `--set train.step2_iters=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the configured synthetic datasets as manifests plus PNGs.
    Synth {
        /// Replaces existing dataset directories.
        #[arg(long)]
        force: bool,
    },
    /// Staged two-stepped training over the configured manifests.
    Train,
    /// Adapts a trained checkpoint to the unlabelled target.
    Adapt,
    /// Scores a checkpoint on the test set.
    Eval,
    /// Writes per-channel PNGs of one backbone layer.
    DumpResponses {
        #[arg(long)]
        layer: String,
        /// Image ids from the test set; the first `limit` images when empty.
        #[arg(long = "image")]
        images: Vec<String>,
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
    /// Times single-image against cross-image retrieval.
    BenchSirCir {
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 100)]
        gallery: usize,
    },
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(path) => ExperimentConfig::load(path, &cli.set),
        None => ExperimentConfig::from_toml("", &cli.set),
    }
}

/// Runs one subcommand and prints a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { force } => {
            for path in commands::cmd_synth(&cfg, force)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train => {
            let out = commands::cmd_train(&cfg)?;
            println!("trained {} iterations, wrote {}", out.iterations, out.checkpoint.display());
        }
        Command::Adapt => {
            let out = commands::cmd_adapt(&cfg)?;
            for r in &out.summary.rounds {
                let agreement = r.label_agreement.map_or("-".to_string(), |a| format!("{a:.3}"));
                println!("round {}: {} pseudo-classes, agreement {agreement}", r.round, r.num_pseudo_classes);
            }
            println!("wrote {}", out.checkpoint.display());
        }
        Command::Eval => {
            let out = commands::cmd_eval(&cfg)?;
            print!("{}", rank_table_text(&out.report));
            println!("wrote {}", out.json.display());
        }
        Command::DumpResponses { layer, images, limit } => {
            let written = commands::cmd_dump_responses(&cfg, &layer, &images, limit)?;
            println!("wrote {} response maps", written.len());
        }
        Command::BenchSirCir { probes, gallery } => {
            let r = commands::cmd_bench_sir_cir(&cfg, probes, gallery)?;
            println!(
                "{} probes x {} gallery: single-image {:.4}s, cross-image {:.4}s ({:.1}x)",
                r.probes, r.gallery, r.sir_seconds, r.cir_seconds, r.speedup
            );
        }
    }
    Ok(())
}
