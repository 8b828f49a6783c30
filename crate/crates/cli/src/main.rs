//! `cof` — conformative filtering pipeline over delimited event logs:
//! time-based splitting, taste-hierarchy training, group inspection,
//! recommendation, evaluation with grid search, and the group-coverage
//! bound calculator. Logs go to stderr, data to stdout or `--out` files.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cof", version, about = "Conformative filtering for implicit feedback")]
struct Cli {
    /// JSON config file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice in the invocation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct FormatArgs {
    /// Field delimiter of the event file.
    #[arg(long)]
    delimiter: Option<String>,

    /// Column roles, e.g. `user,item,timestamp` or `user,item,_,timestamp`.
    #[arg(long)]
    columns: Option<String>,
}

#[derive(Debug, Args)]
struct HierarchyArgs {
    /// Largest sibling cluster per level.
    #[arg(long)]
    max_cluster_size: Option<usize>,

    /// Stop stacking levels at this many latents.
    #[arg(long)]
    top_level_max: Option<usize>,

    #[arg(long)]
    em_restarts: Option<usize>,

    #[arg(long)]
    em_tol: Option<f64>,

    #[arg(long)]
    em_max_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Event file to split.
    #[arg(long)]
    input: Option<PathBuf>,

    #[command(flatten)]
    format: FormatArgs,

    /// Train,validation,test fractions (must sum to 1).
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,

    /// Drop users with fewer events, iterated to a fixpoint.
    #[arg(long)]
    min_user_events: Option<usize>,

    /// Drop items with fewer events, iterated to a fixpoint.
    #[arg(long)]
    min_item_events: Option<usize>,

    /// Directory receiving train.tsv, valid.tsv and test.tsv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training event file.
    #[arg(long)]
    input: Option<PathBuf>,

    #[command(flatten)]
    format: FormatArgs,

    /// Where to write the model JSON.
    #[arg(long)]
    model: Option<PathBuf>,

    /// Optional TSV report: latent, level, child, P(child=1|s1), P(child=1|s0).
    #[arg(long)]
    report: Option<PathBuf>,

    #[command(flatten)]
    hierarchy: HierarchyArgs,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: Option<PathBuf>,

    /// Latent variable id, e.g. Z1_3.
    #[arg(long)]
    latent: String,
}

#[derive(Debug, Args)]
struct RecommendArgs {
    #[arg(long)]
    model: Option<PathBuf>,

    /// Training event file (histories and candidate exclusions).
    #[arg(long)]
    train: Option<PathBuf>,

    #[command(flatten)]
    format: FormatArgs,

    /// Hierarchy level whose taste groups are used.
    #[arg(long)]
    level: Option<u32>,

    /// History window for group profiles: a count or `full`.
    #[arg(long)]
    history: Option<String>,

    /// List length per user.
    #[arg(long)]
    top: Option<usize>,

    /// Recommend for one user id.
    #[arg(long, conflicts_with = "all")]
    user: Option<String>,

    /// Recommend for every training user.
    #[arg(long)]
    all: bool,

    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Method {
    Cof,
    Pop,
    Uknn,
    Iknn,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    method: Method,

    #[arg(long)]
    train: Option<PathBuf>,

    #[arg(long)]
    valid: Option<PathBuf>,

    #[arg(long)]
    test: Option<PathBuf>,

    #[command(flatten)]
    format: FormatArgs,

    /// Reuse a trained model instead of building one from the train split.
    #[arg(long)]
    model: Option<PathBuf>,

    #[arg(long)]
    level: Option<u32>,

    /// History window: a count or `full`.
    #[arg(long)]
    history: Option<String>,

    /// Grid of history windows to search on the validation split.
    #[arg(long = "grid-H", value_delimiter = ',')]
    grid_h: Option<Vec<String>>,

    /// Grid of levels to search on the validation split.
    #[arg(long = "grid-l", value_delimiter = ',')]
    grid_l: Option<Vec<u32>>,

    /// After selection, retrain on train+validation before testing.
    #[arg(long)]
    retrain: bool,

    /// Neighborhood size for the kNN baselines.
    #[arg(long)]
    k: Option<usize>,

    /// Recall/diversity cutoffs.
    #[arg(long, value_delimiter = ',')]
    top: Option<Vec<usize>>,

    /// Write (H, recall) and (l, recall) validation series to
    /// PREFIX_H.tsv and PREFIX_l.tsv.
    #[arg(long)]
    emit_curves: Option<PathBuf>,

    /// Report file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,

    #[command(flatten)]
    hierarchy: HierarchyArgs,
}

#[derive(Debug, Args)]
struct BoundArgs {
    /// Total number of items N.
    #[arg(long)]
    items: u64,

    /// Picks per person n.
    #[arg(long)]
    picks: u64,

    /// Required coverage fraction q in [0, 1).
    #[arg(long)]
    coverage: f64,

    /// Required confidence p in [0, 1).
    #[arg(long)]
    confidence: f64,

    /// Also Monte-Carlo check the bound with this many trials.
    #[arg(long)]
    simulate: Option<u64>,

    /// Group size for the simulation (default: the computed bound).
    #[arg(long)]
    group_size: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split an event log chronologically into train/validation/test files.
    Split(SplitArgs),
    /// Learn the taste hierarchy from a training event file.
    Train(TrainArgs),
    /// Show one taste group's marginal and its children's emissions.
    Inspect(InspectArgs),
    /// Rank unconsumed items for users.
    Recommend(RecommendArgs),
    /// Score a method on a held-out split, optionally grid-searching (l, H).
    Evaluate(EvaluateArgs),
    /// Minimal group size for the item-coverage guarantee.
    Bound(BoundArgs),
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config = config::RunConfig::load(cli.config.as_ref())?;
    let seed = config::pick(cli.seed, config.seed, 0);
    match cli.command {
        Command::Split(args) => commands::split(args, &config),
        Command::Train(args) => commands::train(args, &config, seed),
        Command::Inspect(args) => commands::inspect(args, &config),
        Command::Recommend(args) => commands::recommend(args, &config),
        Command::Evaluate(args) => commands::evaluate(args, &config, seed),
        Command::Bound(args) => commands::bound(args, seed),
    }
}
