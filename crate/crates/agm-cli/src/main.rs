//! Operator surface for the attribution-guided masking experiment
//! framework: corpus generation, the training grid, summary reports,
//! attribution heatmaps, and the drift-score study.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric
//! failure, 3 missing artifact.

mod commands;
mod config;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agm_core::Error;

use config::{workspace_path, RunConfig};

#[derive(Parser)]
#[command(
    name = "agm",
    about = "Attribution-guided masking for cross-domain text classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (TOML); defaults applied when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset: desk (default) or full.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Dotted-path overrides, e.g. --set train.lr=1e-3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> agm_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(&self.preset)?,
        };
        for s in &self.sets {
            cfg.apply_override(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic domain-shift corpus files.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus output directory.
        #[arg(long, default_value = "data")]
        out: String,
    },
    /// Train the (method, fold, seed) grid over a corpus.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory produced by generate-data.
        #[arg(long, default_value = "data")]
        data: String,
        /// Run-output root.
        #[arg(long, default_value = "runs")]
        out: String,
        /// Redo cells whose directories already exist.
        #[arg(long)]
        overwrite: bool,
        /// Train one single-source model per domain (for the drift study)
        /// instead of the leave-one-out grid.
        #[arg(long)]
        per_domain: bool,
    },
    /// Summarize completed cells into CSV and markdown tables.
    Report {
        /// Results root holding cell directories.
        #[arg(long, default_value = "runs")]
        results: String,
        /// Where to write summary.csv and tables.md.
        #[arg(long, default_value = "reports")]
        out: String,
    },
    /// Render token-attribution heatmaps for one or two checkpoints.
    Heatmap {
        /// Checkpoint(s); two render side by side.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// JSONL examples to render.
        #[arg(long)]
        examples: PathBuf,
        /// Vocabulary file matching the checkpoints.
        #[arg(long)]
        vocab: PathBuf,
        /// Output HTML path.
        #[arg(long, default_value = "heatmap.html")]
        out: String,
        /// Detection percentile for outlining.
        #[arg(long, default_value_t = 0.75)]
        tau: f64,
        /// Also print an ANSI rendering to stdout.
        #[arg(long)]
        ansi: bool,
    },
    /// Run the attribution-drift study over per-domain checkpoints.
    Ads {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding {domain}.ckpt single-source models.
        #[arg(long)]
        models: String,
        /// Corpus directory (for the held-out diagnostic splits).
        #[arg(long, default_value = "data")]
        data: String,
        /// Where to write ads.csv and correlations.json.
        #[arg(long, default_value = "reports")]
        out: String,
        /// Integration steps for the attribution vectors.
        #[arg(long)]
        ig_steps: Option<usize>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Io(_) => 3,
        _ => 1,
    }
}

fn run() -> agm_core::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData { config, out } => {
            let cfg = config.resolve()?;
            commands::generate::run(&cfg, &workspace_path(&out))
        }
        Command::Train {
            config,
            data,
            out,
            overwrite,
            per_domain,
        } => {
            let cfg = config.resolve()?;
            let args = commands::train::TrainArgs {
                data_dir: workspace_path(&data),
                out_dir: workspace_path(&out),
                overwrite,
                per_domain,
            };
            commands::train::run(&cfg, &args)?;
            if per_domain {
                let seed = cfg.run.seeds[0];
                commands::train::collect_domain_models(&args.out_dir, seed)?;
                println!(
                    "collected per-domain checkpoints under {}",
                    args.out_dir.join("domain-models").display()
                );
            }
            Ok(())
        }
        Command::Report { results, out } => {
            commands::report::run(&workspace_path(&results), &workspace_path(&out))
        }
        Command::Heatmap {
            checkpoints,
            examples,
            vocab,
            out,
            tau,
            ansi,
        } => {
            let args = commands::heatmap::HeatmapArgs {
                checkpoints,
                examples,
                vocab,
                out: workspace_path(&out),
                tau_high: tau,
                ansi,
            };
            commands::heatmap::run(&args)
        }
        Command::Ads {
            config,
            models,
            data,
            out,
            ig_steps,
        } => {
            let cfg = config.resolve()?;
            let args = commands::ads::AdsArgs {
                models_dir: workspace_path(&models),
                data_dir: workspace_path(&data),
                out_dir: workspace_path(&out),
                ig_steps: ig_steps.unwrap_or_else(commands::ads::default_ig_steps),
            };
            commands::ads::run(&cfg, &args)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
