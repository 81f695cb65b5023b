use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctune_core::filters::FilterName;
use ctune_core::predictor::{ModelKind, Objective};
use ctune_core::search::Strategy;

const AFTER_HELP: &str = "\
Exploration strategies:
  glob-flags-rnd-uniform    each flag included independently with probability p
  glob-flags-rnd-fixed      random combinations of exactly --length flags
  glob-flags-one-by-one     every single flag on top of the base level
  glob-flags-one-off-rnd    random search, then prune to influential flags

Filters:
  get-all-best-flags-time               correct, stable cases improving time
  get-all-best-flags-time-size-pareto   time/size Pareto frontier

Models: nearest_neighbor, per_flag_probability
Objectives: time, size, time_and_size

Environment:
  CCC_DB, CCC_CT_DB     local and shared repository paths (--db, --shared-db)
  CCC_RUNS              repeats per run (--repeats)
  CCC_OPT_PLATFORM      platform flags added to every compilation
  CCC_PROCESSOR_NUM     pin runs to this processor
  CCC_NOTES             free-form notes attached to records
  CCC_RUN_RE            run-time environment (native only)
  CCC_HC_HOOK           command printing NAME=count hardware counters
  CCC_URL CCC_USER CCC_PASS CCC_SSL CCC_CT_URL CCC_CT_USER CCC_CT_PASS CCC_CT_SSL
                        accepted and ignored

Exit status: 0 success, 1 operational failure, 2 usage error.";

#[derive(Debug, Parser)]
#[command(name = "ctune", version, about = "Iterative compilation and optimization sharing", after_help = AFTER_HELP)]
pub struct Cli {
    /// Local repository.
    #[arg(long, global = true, env = "CCC_DB", default_value = "ctune-db")]
    pub db: PathBuf,
    /// Shared repository.
    #[arg(long, global = true, env = "CCC_CT_DB")]
    pub shared_db: Option<PathBuf>,
    /// Program directory.
    #[arg(long, global = true, default_value = ".")]
    pub dir: PathBuf,
    /// Print results as packets.
    #[arg(long, global = true)]
    pub packets: bool,
    /// Seed for surrogate noise and, with --deterministic, ids and dates.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Seeded ids and a stepped clock instead of random ids and wall time.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// More logging (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile the program in --dir and record the compilation.
    Comp(CompArgs),
    /// Run the last compiled binary on a dataset.
    Run(RunArgs),
    /// Search the flag space of the program in --dir.
    Explore(ExploreArgs),
    /// Select cases from the local repository.
    Filter(FilterArgs),
    /// Repository maintenance.
    Db {
        #[command(subcommand)]
        command: DbCommand,
    },
    /// Train a prediction model.
    Train(TrainArgs),
    /// Predict flags from program features.
    Predict(PredictArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
    /// Run-time adaptation simulator.
    Adapt {
        #[command(subcommand)]
        command: AdaptCommand,
    },
    /// Register entities.
    Register {
        #[command(subcommand)]
        command: RegisterCommand,
    },
}

#[derive(Debug, Args)]
pub struct CompArgs {
    /// Compiler: `<name>`, `real:<name>` or `synthetic:<name>`.
    pub compiler: String,
    /// Optimization flags recorded with the compilation.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub flags: Vec<String>,
    /// Extra compiler flags that are not recorded.
    #[arg(long, allow_hyphen_values = true, default_value = "")]
    pub aux: String,
    /// Write packet files only; do not record in the repository.
    #[arg(long)]
    pub no_record: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset number (1-based).
    #[arg(value_parser = clap::value_parser!(u32).range(1..))]
    pub dataset: u32,
    /// 1 for the baseline reference run that captures outputs.
    #[arg(value_parser = clap::value_parser!(u8).range(0..=1), default_value_t = 0)]
    pub baseline: u8,
    /// Repeats (overrides CCC_RUNS).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub repeats: Option<u32>,
    /// Compiler, if different from the last `comp`.
    #[arg(long)]
    pub compiler: Option<String>,
    #[arg(long)]
    pub no_record: bool,
}

#[derive(Debug, Args)]
pub struct ExploreArgs {
    /// Strategy name (see below).
    pub strategy: Strategy,
    /// Compiler, as for `comp`.
    #[arg(long)]
    pub compiler: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
    /// Flag space file; defaults to the surrogate's flags.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub probability: f64,
    /// Flags per combination for glob-flags-rnd-fixed.
    #[arg(long, default_value_t = 1)]
    pub length: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub dataset: u32,
    #[arg(long)]
    pub repeats: Option<u32>,
    #[arg(long, default_value = "-O3", allow_hyphen_values = true)]
    pub reference: String,
    /// Relative threshold for pruning.
    #[arg(long, default_value_t = 0.02)]
    pub epsilon: f64,
    /// Emit antonyms for unselected flags.
    #[arg(long)]
    pub antonyms: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Filter name (see below).
    pub name: FilterName,
    /// Program id or name.
    #[arg(long)]
    pub program: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub min_speedup: f64,
    /// Noise gate on relative run-time spread.
    #[arg(long, default_value_t = 0.05)]
    pub gate: f64,
    /// Add compile time as a third Pareto objective.
    #[arg(long)]
    pub with_compile_time: bool,
    /// Read the shared repository instead of the local one.
    #[arg(long)]
    pub shared: bool,
}

#[derive(Debug, Subcommand)]
pub enum DbCommand {
    /// Create the repository if missing and print its header.
    Info,
    /// Merge records; `local` and `shared` name the configured repositories.
    Merge {
        #[arg(long, default_value = "local")]
        from: String,
        #[arg(long, default_value = "shared")]
        to: String,
        /// Only correct, stable best-time and Pareto cases.
        #[arg(long)]
        filtered: bool,
    },
    /// List cases.
    Query(QueryArgs),
    /// Set the rank of a case.
    Rank {
        compile_id: String,
        rank: i64,
        #[arg(long)]
        dataset: Option<u32>,
    },
    /// Import `_comp`, `_run` and `*.pk` packet files from a directory.
    Import { dir: PathBuf },
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub program: Option<String>,
    #[arg(long)]
    pub compiler: Option<String>,
    #[arg(long)]
    pub platform: Option<String>,
    #[arg(long)]
    pub dataset: Option<u32>,
    #[arg(long)]
    pub min_speedup: Option<f64>,
    #[arg(long)]
    pub min_rank: Option<i64>,
    /// Only cases with correct output.
    #[arg(long)]
    pub correct: bool,
    #[arg(long)]
    pub include_baselines: bool,
    #[arg(long)]
    pub shared: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FeatureKindArg {
    Static,
    Dynamic,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Compiler id or name.
    #[arg(long)]
    pub compiler: String,
    /// Platform id or name; defaults to this machine.
    #[arg(long)]
    pub platform: Option<String>,
    #[arg(long = "kind", default_value = "nearest_neighbor")]
    pub kind: ModelKind,
    #[arg(long, default_value = "time")]
    pub objective: Objective,
    #[arg(long, value_enum, default_value = "static")]
    pub features: FeatureKindArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write the model here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Leave-one-out evaluation over surrogate program directories.
    #[arg(long)]
    pub evaluate: bool,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["model", "service"]))]
pub struct PredictArgs {
    /// Model file written by `train --out`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Prediction service URL, e.g. http://host:8080/predict.
    #[arg(long)]
    pub service: Option<String>,
    /// Compiler id; defaults to the model's.
    #[arg(long)]
    pub compiler: Option<String>,
    /// Platform id; defaults to the model's or this machine.
    #[arg(long)]
    pub platform: Option<String>,
    #[arg(long = "kind")]
    pub kind: Option<ModelKind>,
    #[arg(long)]
    pub objective: Option<Objective>,
    /// `ft1=9, ft2=4, ...`; defaults to the features of the program in --dir.
    #[arg(long)]
    pub features: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Serve these model files instead of training from the repository.
    #[arg(long)]
    pub model: Vec<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Seconds between repository change checks.
    #[arg(long, default_value_t = 10)]
    pub retrain_interval: u64,
}

#[derive(Debug, Subcommand)]
pub enum AdaptCommand {
    /// Simulate clone selection over a generated phase trace.
    Simulate {
        /// Adaptive program file.
        #[arg(long)]
        program: PathBuf,
        /// Phase model file.
        #[arg(long)]
        phases: PathBuf,
        /// Overrides the phase model's step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 8)]
        bins: usize,
        #[arg(long, default_value_t = 1000)]
        recalibrate: u64,
        /// Overrides the program's monitoring overhead.
        #[arg(long)]
        overhead: Option<f64>,
        /// Write a per-step CSV time series.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Replace the slowest clones with repository combinations.
    Evolve {
        #[arg(long)]
        program: PathBuf,
        /// Number of clones to replace.
        #[arg(short, long, default_value_t = 1)]
        k: usize,
        /// Phase model used to observe clone times.
        #[arg(long)]
        phases: Option<PathBuf>,
        /// Write the new program here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum RegisterCommand {
    /// The program in --dir.
    Program,
    Compiler {
        name: String,
        /// Invocation with {flags}, {output} and {sources} placeholders.
        #[arg(long, allow_hyphen_values = true)]
        template: String,
        #[arg(long, default_value = "")]
        flag_space: String,
    },
    Platform {
        name: String,
        #[arg(long, default_value = "")]
        notes: String,
    },
    Environment {
        name: String,
        #[arg(long, default_value = "")]
        notes: String,
    },
}
