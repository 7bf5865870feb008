//! `dream` command-line front end. Exit codes: 0 success, 1 usage, 2 data
//! error, 3 numeric failure.

mod cache;
mod commands;
mod config;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use commands::{GenArgs, RunOverrides};
use config::RunConfig;
use dream_core::error::Result;
use dream_core::train::Ablation;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "dream",
    version,
    about = "Dual-representation multimodal recommender: prepare, train, evaluate, diagnose"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct AblationFlags {
    /// Replace the filter gate with a plain linear feature projection.
    #[arg(long)]
    no_filter_gate: bool,
    /// Skip relation-graph propagation in the modal line.
    #[arg(long)]
    no_relation_graphs: bool,
    /// Drop the text modality.
    #[arg(long)]
    no_text: bool,
    /// Drop the image modality.
    #[arg(long)]
    no_image: bool,
    /// Disable the whole modal line (behavior line + ranking loss only).
    #[arg(long)]
    no_modal_encoders: bool,
    /// Zero the similarity-supervision weight.
    #[arg(long)]
    no_s3: bool,
    /// Zero the intra-alignment weight.
    #[arg(long)]
    no_intra: bool,
    /// Zero the inter-alignment weight.
    #[arg(long)]
    no_inter: bool,
    /// Zero both alignment weights.
    #[arg(long)]
    no_alignment: bool,
}

impl AblationFlags {
    fn to_vec(&self) -> Vec<Ablation> {
        let mut v = Vec::new();
        let pairs = [
            (self.no_filter_gate, Ablation::NoFilterGate),
            (self.no_relation_graphs, Ablation::NoRelationGraphs),
            (self.no_text, Ablation::NoText),
            (self.no_image, Ablation::NoImage),
            (self.no_modal_encoders, Ablation::NoModalEncoders),
            (self.no_s3, Ablation::NoS3),
            (self.no_intra, Ablation::NoIntra),
            (self.no_inter, Ablation::NoInter),
            (self.no_alignment, Ablation::NoAlignment),
        ];
        for (on, a) in pairs {
            if on {
                v.push(a);
            }
        }
        v
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw files, build graphs and splits, and cache them.
    Prepare {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the model and write checkpoint, logs, and metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ablations: AblationFlags,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint stem (reads `<stem>.bin` and `<stem>.json`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the full model plus each ablation row and emit one CSV table.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated ablation flags; defaults to the standard set of 8.
        #[arg(long)]
        rows: Option<String>,
    },
    /// Train with per-epoch diagnostics and write drift/alignment/line CSVs.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ablations: AblationFlags,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write all six representation matrices for external visualization.
    ExportEmbeddings {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate a block-preference synthetic dataset on disk.
    GenSynthetic {
        #[arg(long, default_value_t = 64)]
        users: usize,
        #[arg(long, default_value_t = 48)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 12)]
        interactions_per_user: usize,
        #[arg(long, default_value_t = 0.7)]
        in_block_prob: f64,
        #[arg(long, default_value_t = 0.2)]
        feature_noise: f32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn overrides(common: &CommonArgs, ablations: Vec<Ablation>) -> RunOverrides {
    RunOverrides {
        seed: common.seed,
        out: common.out.clone(),
        ablations,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { common } => {
            let config = RunConfig::load(&common.config)?;
            commands::cmd_prepare(&config)
        }
        Command::Train { common, ablations } => {
            let config = RunConfig::load(&common.config)?;
            commands::cmd_train(&config, &overrides(&common, ablations.to_vec()))
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let config = RunConfig::load(&common.config)?;
            commands::cmd_eval(&config, &checkpoint, &split, &overrides(&common, vec![]))
        }
        Command::Ablate { common, rows } => {
            let config = RunConfig::load(&common.config)?;
            let rows = match rows {
                None => Ablation::default_set(),
                Some(list) => list
                    .split(',')
                    .map(|flag| {
                        Ablation::from_flag(flag.trim()).ok_or_else(|| {
                            dream_core::DreamError::Config(format!(
                                "unknown ablation flag `{flag}`"
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            commands::cmd_ablate(&config, &rows, &overrides(&common, vec![]))
        }
        Command::Diagnose { common, ablations } => {
            let config = RunConfig::load(&common.config)?;
            commands::cmd_diagnose(&config, &overrides(&common, ablations.to_vec()))
        }
        Command::Gradcheck { common } => {
            let config = RunConfig::load(&common.config)?;
            commands::cmd_gradcheck(&config, &overrides(&common, vec![]))
        }
        Command::ExportEmbeddings { common, checkpoint } => {
            let config = RunConfig::load(&common.config)?;
            commands::cmd_export_embeddings(&config, &checkpoint, &overrides(&common, vec![]))
        }
        Command::GenSynthetic {
            users,
            items,
            blocks,
            dim,
            interactions_per_user,
            in_block_prob,
            feature_noise,
            seed,
            out,
        } => commands::cmd_gen_synthetic(&GenArgs {
            users,
            items,
            blocks,
            dim,
            interactions_per_user,
            in_block_prob,
            feature_noise,
            seed,
            out,
        }),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
