//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "selfie", version, about = "Train and evaluate activation-to-embedding adapters for frozen language models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalFlags,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command. They override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalFlags {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; replaces every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory. Every output goes here.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Backend name from the registry (`echo`, `mix`, ...).
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Adapter checkpoint to evaluate or probe.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Also render PNG plots.
    #[arg(long, global = true)]
    pub plot: bool,
}

impl GlobalFlags {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            backend: self.backend.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an adapter.
    Train,
    /// Evaluate a checkpoint (or run an architecture sweep).
    Eval,
    /// Run a probe.
    Probe {
        #[command(subcommand)]
        probe: ProbeCommand,
    },
    /// Build and transform datasets.
    Data {
        #[command(subcommand)]
        op: DataCommand,
    },
    /// Render PNGs for existing artifacts.
    Plot {
        /// curve.jsonl, histogram/pca CSVs, or heatmaps.json.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProbeCommand {
    /// Bridge-entity detection heatmaps.
    Bridge {
        /// JSON-lines case file.
        #[arg(long)]
        cases: Option<PathBuf>,
    },
    /// Inject f(0) and read out the bias.
    Zero,
    /// Describe the final-token activation of a new prompt.
    Novel {
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
        /// Subtract the dataset mean stored next to the checkpoint.
        #[arg(long)]
        contrastive: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Dataset from SAE decoder rows and their labels.
    IngestSae {
        /// Vector bank of decoder rows.
        #[arg(long)]
        bank: PathBuf,
        /// JSON map from row index to label.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Mean-subtracted topic vectors from the backend.
    ExtractContrastive {
        /// JSON-lines topic file.
        #[arg(long)]
        topics: PathBuf,
        /// Layers to extract (comma separated); the middle half when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Relabel a dataset.
    Transform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        uppercase: bool,
        /// JSON map from record id to extra labels.
        #[arg(long)]
        paraphrases: Option<PathBuf>,
    },
    /// Keep a seeded fraction of the records.
    Subsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        fraction: f64,
    },
    /// Cumulative explained variance per principal component.
    Pca {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the configured synthetic task as train/val datasets.
    Synth,
}
