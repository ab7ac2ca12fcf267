//! `relactrl` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input, 3 verification failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod metrics;
pub mod svg;

pub const SCHEMA_VERSION: &str = "1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<relactrl_core::Error> for CliError {
    fn from(e: relactrl_core::Error) -> Self {
        Self::invalid(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "relactrl",
    version,
    about = "Relevance-guided control branches: scoring, placement, costing and checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score layers from a skip-ablation metrics table and pick the top k.
    Relevance(RelevanceArgs),
    /// Parameter and FLOP accounting for a placement plan.
    Cost(CostArgs),
    /// Check the interactive-distance bound and a Monte-Carlo estimate.
    VerifyDistance(DistanceArgs),
    /// Build the toy controlled model, run skips or a full skip sweep.
    Demo(DemoArgs),
    /// Time the shuffle mixer against full attention at equal width.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Ranks,
    Raw,
}

#[derive(Debug, Args)]
pub struct RelevanceArgs {
    /// Metrics CSV (`layer_index,fid,hdd`); defaults to the bundled synthetic table.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BasisArg::Ranks)]
    pub basis: BasisArg,
    /// Optional run config; only its tier policy is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BlockArg {
    Rglc,
    Copy,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Run config; defaults to the PixArt-α-sized backbone.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Plan JSON; defaults to the relevance plan from the bundled table.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// `copy:K` or `none`.
    #[arg(long, default_value = "copy:13")]
    pub baseline: String,
    /// Overrides the config's k for the default plan.
    #[arg(long)]
    pub k: Option<usize>,
    /// Block type for the default plan.
    #[arg(long, value_enum, default_value_t = BlockArg::Rglc)]
    pub block: BlockArg,
    /// Metrics table behind the default plan.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    #[arg(long)]
    pub h: usize,
    #[arg(long)]
    pub w: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub s: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, env = "RELACTRL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Row of the queried element on the `H × (W·d)` grid.
    #[arg(long, default_value_t = 0)]
    pub th: usize,
    /// Column of the queried element on the `H × (W·d)` grid.
    #[arg(long, default_value_t = 0)]
    pub tw: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Run config; defaults to the 27-layer toy model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Plan JSON; defaults to a control block on every layer.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, env = "RELACTRL_SEED")]
    pub seed: Option<u64>,
    /// Draw the zero-convs from N(0, 0.02²) so skips become visible.
    #[arg(long)]
    pub demo_init: bool,
    #[arg(long)]
    pub skip: Option<usize>,
    /// Run a skip sweep over every hosted layer and write a metrics CSV here.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub trials: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Run config supplying D, H and W; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub n_groups: usize,
    #[arg(long, default_value_t = 2)]
    pub s: usize,
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    #[arg(long, env = "RELACTRL_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command. Reports
/// go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{e}");
            return code;
        }
    };
    let result = match &cli.command {
        Command::Relevance(a) => commands::relevance(a, out),
        Command::Cost(a) => commands::cost(a, out),
        Command::VerifyDistance(a) => commands::verify_distance(a, out),
        Command::Demo(a) => commands::demo(a, out),
        Command::Bench(a) => commands::bench(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}
