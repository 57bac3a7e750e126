//! Command surface: `gen-data`, `train`, `eval`, `plot` and `compare`.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "sync", version, about = "Static-dynamic causal representation learning on drifting domains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic domain sequence and write it to a dataset file.
    GenData(GenDataArgs),
    /// Train SYNC (and optionally the ERM baseline) on the source block.
    Train(TrainArgs),
    /// Score a checkpoint on the intermediate or target block.
    Eval(EvalArgs),
    /// Render a decision-boundary grid or an MI curve to PNG.
    Plot(PlotArgs),
    /// Train SYNC and ERM on the same split and tabulate Wst / Avg.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Circle,
    Sine,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Circle => "circle",
            DatasetKind::Sine => "sine",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "circle")]
    pub dataset: DatasetKind,
    /// Circle-only relabelling: none, gradual, abrupt or noise.
    #[arg(long, default_value = "none")]
    pub variant: String,
    /// Defaults to 30 for circle and 24 for sine.
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub per_domain: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; relative paths go under the output root.
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by commands that resolve a run configuration.
#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// TOML run file with optional [data], [train] and [output] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file to read instead of generating one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed for generating the dataset.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub per_domain: Option<usize>,
    /// Override any config key, e.g. `--set train.alpha2=0.05`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.map(|d| d.name().to_string()),
            data_path: self.data.clone(),
            seed: self.seed,
            data_seed: self.data_seed,
            epochs: self.epochs,
            per_domain: self.per_domain,
            out_dir: self.out_dir.clone(),
            set: self.set.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Sync,
    Erm,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "sync")]
    pub method: Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitKind {
    Intermediate,
    Target,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Full dataset file, split 1/2 : 1/6 : 1/3 into source, intermediate and
    /// target blocks.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "target")]
    pub split: SplitKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the records JSON and the metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Boundary-grid matrix file to render.
    #[arg(long, conflicts_with_all = ["curve", "checkpoint", "truth"])]
    pub grid: Option<PathBuf>,
    /// MI-curve CSV to render.
    #[arg(long, conflicts_with_all = ["checkpoint", "truth"])]
    pub curve: Option<PathBuf>,
    /// SYNC checkpoint whose boundary at domain `--t` is computed and drawn.
    #[arg(long, conflicts_with = "truth")]
    pub checkpoint: Option<PathBuf>,
    /// Draw a generator's analytic boundary at domain `--t`.
    #[arg(long, value_enum)]
    pub truth: Option<DatasetKind>,
    #[arg(long)]
    pub t: Option<usize>,
    /// Domain count of the sequence, for `--truth`.
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub resolution: usize,
    /// Dataset file whose domain-`t` samples are overlaid on a grid.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// PNG path. Computed grids are also written next to it as `.grid.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Training seeds, comma separated. Overrides `--seed`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}
