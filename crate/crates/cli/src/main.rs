//! `compnn` command-line tool.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 when
//! the environment fails (unreadable or unwritable files).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use compnn_core::database::DEFAULT_TOP_K;
use compnn_core::search::{DEFAULT_ITERATIONS, DEFAULT_SAMPLES_PER_CELL};

#[derive(Debug, Parser)]
#[command(
    name = "compnn",
    version,
    about = "Patch-level nearest-neighbor reconstruction of image-to-image network outputs"
)]
struct Cli {
    /// Worker threads (defaults to the number of CPUs). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest and load its tensors; prints an ingest report.
    Ingest(IngestArgs),
    /// Search a nearest-neighbor field for a query and compose its reconstruction.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against ground-truth labels.
    Evaluate(EvaluateArgs),
    /// Draw correspondence maps for a field dump.
    Visualize(VisualizeArgs),
    /// Derive a manifest holding a subset of the training pairs.
    Filter(FilterArgs),
    /// Render semantic correspondences between two pairs.
    Semantic(SemanticArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    manifest: PathBuf,
    /// Only read tensors of these layers (comma separated).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SearchMode {
    Oracle,
    Hpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SourceArg {
    Input,
    Output,
    Both,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    layer: String,
    /// Use this database pair as the query.
    #[arg(long, conflicts_with = "query_tensor", required_unless_present = "query_tensor")]
    query_id: Option<u32>,
    /// Query activation tensor for `--layer`.
    #[arg(long)]
    query_tensor: Option<PathBuf>,
    /// Query tensor for the descriptor layer, used for nearest-image ranking.
    #[arg(long, requires = "query_tensor")]
    query_descriptor: Option<PathBuf>,
    /// Leave the query pair out of the candidate set.
    #[arg(long, requires = "query_id")]
    exclude_query: bool,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random-search samples per cell and iteration.
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_CELL)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = SearchMode::Hpm)]
    search: SearchMode,
    #[arg(long, value_enum, default_value_t = SourceArg::Both)]
    source: SourceArg,
    /// Ground-truth label PNG; adds a metric report for the output reconstruction.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Class palette JSON (falls back to the manifest's palette).
    #[arg(long)]
    palette: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Reconstructed label PNG.
    #[arg(long, conflicts_with = "field", required_unless_present = "field")]
    recon: Option<PathBuf>,
    /// Field dump to compose the reconstruction from (needs --manifest and --layer).
    #[arg(long, requires_all = ["manifest", "layer"])]
    field: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Label PNG produced by the network itself, for signed differences.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    layer: String,
    #[arg(long)]
    query_image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Keep only these ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    include: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<u32>,
    /// Keep pairs carrying this tag (repeatable, all must match).
    #[arg(long = "tag")]
    tags: Vec<String>,
    /// Drop pairs carrying this tag (repeatable).
    #[arg(long = "exclude-tag")]
    exclude_tags: Vec<String>,
    /// Derived manifest path; the id mapping goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SemanticArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    layer: String,
    #[arg(long)]
    a: u32,
    #[arg(long)]
    b: u32,
    /// Label PNG of pair A.
    #[arg(long)]
    labels_a: PathBuf,
    #[arg(long)]
    labels_b: PathBuf,
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Class names or indices to draw (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    classes: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be ≥ 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Visualize(a) => commands::visualize(a),
        Command::Filter(a) => commands::filter(a),
        Command::Semantic(a) => commands::semantic(a),
    };
    match result {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_environmental() { 3 } else { 2 })
        }
    }
}
