//! Compile-and-run abstraction producing compilation and execution records.

#[cfg(unix)]
mod real;
pub mod session;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::model::{
    CompilationRecord, CompilerDescriptor, EntityId, ExecutionRecord, FlagCombination, FlagError,
    ProfileEntry, ProgramDescriptor, Stamper,
};
use crate::packet::quantize;
use crate::repository::Repository;

#[cfg(unix)]
pub use real::RealBackend;
pub use synthetic::{
    parse_synthetic_programs, write_synthetic_programs, FlagEffect, SyntheticBackend,
    SyntheticError, SyntheticProgram,
};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("compiler not found: {0}")]
    CompilerNotFound(String),
    #[error("compilation failed:\n{log}")]
    CompileFailed { log: String },
    #[error("{what} timed out after {seconds} s")]
    Timeout { what: &'static str, seconds: u64 },
    #[error("run failed: {0}")]
    RunFailed(String),
    #[error("no reference outputs stored for dataset {dataset}; perform a baseline run first")]
    MissingReference { dataset: u32 },
    #[error("unsupported runtime environment {0:?}")]
    UnsupportedRuntime(String),
    #[error("program {0} is not known to this backend")]
    UnknownProgram(String),
    #[error("dataset {dataset} does not exist (program has {count})")]
    InvalidDataset { dataset: u32, count: usize },
    #[error("invalid value {value:?} for {var}")]
    InvalidEnv { var: &'static str, value: String },
    #[error(transparent)]
    Flags(#[from] FlagError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DriverError + '_ {
    move |source| DriverError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Capability {
    Compile,
    Run,
    OutputValidation,
    WallClockTiming,
    CpuTiming,
    HardwareCounters,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompileOutcome {
    pub success: bool,
    pub compile_time: f64,
    pub bin_size: u64,
    pub obj_md5: String,
    pub log: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunTimes {
    pub run_time: f64,
    pub run_time_user: f64,
    pub run_time_sys: f64,
}

/// Named program outputs (stdout plus listed output files).
pub type RunOutputs = BTreeMap<String, Vec<u8>>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// One entry per repeat.
    pub times: Vec<RunTimes>,
    pub output_correct: bool,
    /// Outputs of the last repeat.
    pub outputs: RunOutputs,
    pub profile: BTreeMap<String, ProfileEntry>,
    pub hardware_counters: BTreeMap<String, i64>,
    pub notes: String,
}

/// Registered ids an experiment is recorded under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentIds {
    pub platform: EntityId,
    pub environment: EntityId,
    pub compiler: EntityId,
    pub program: EntityId,
}

/// What a backend compiles and runs.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub ids: ExperimentIds,
    pub program: &'a ProgramDescriptor,
    pub compiler: &'a CompilerDescriptor,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> BTreeSet<Capability>;

    fn compile(
        &self,
        target: &Target<'_>,
        opt: &FlagCombination,
        env: &RunEnv,
    ) -> Result<CompileOutcome, DriverError>;

    /// Runs the binary last compiled with `opt`. With `reference == None`
    /// this is the reference run and its output is correct by definition.
    fn run(
        &self,
        target: &Target<'_>,
        opt: &FlagCombination,
        dataset: u32,
        repeats: u32,
        env: &RunEnv,
        reference: Option<&RunOutputs>,
    ) -> Result<RunOutcome, DriverError>;
}

pub const DEFAULT_COMPILE_TIMEOUT: Duration = Duration::from_secs(300);
pub const DEFAULT_RUN_TIMEOUT: Duration = Duration::from_secs(60);

/// Variables that configure a run.
pub const ENV_RUNS: &str = "CCC_RUNS";
pub const ENV_OPT_PLATFORM: &str = "CCC_OPT_PLATFORM";
pub const ENV_PROCESSOR_NUM: &str = "CCC_PROCESSOR_NUM";
pub const ENV_NOTES: &str = "CCC_NOTES";
pub const ENV_RUN_RE: &str = "CCC_RUN_RE";
pub const ENV_HC_HOOK: &str = "CCC_HC_HOOK";

/// Accepted for compatibility and ignored: credentials and network endpoints.
pub const IGNORED_VARS: &[&str] = &[
    "CCC_URL",
    "CCC_USER",
    "CCC_PASS",
    "CCC_SSL",
    "CCC_CT_URL",
    "CCC_CT_USER",
    "CCC_CT_PASS",
    "CCC_CT_SSL",
    "CCC_CT_DB",
    "CCC_DB",
];

/// Run configuration gathered from `CCC_*` environment variables.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEnv {
    pub runs: u32,
    pub opt_platform: Vec<String>,
    pub processor_num: Option<i64>,
    pub runtime: Option<String>,
    /// Command whose stdout (`NAME=count` lines) supplies hardware counters.
    pub hc_hook: Option<String>,
    pub notes: Vec<(String, String)>,
    pub compile_timeout: Duration,
    pub run_timeout: Duration,
}

impl Default for RunEnv {
    fn default() -> Self {
        Self {
            runs: 1,
            opt_platform: Vec::new(),
            processor_num: None,
            runtime: None,
            hc_hook: None,
            notes: Vec::new(),
            compile_timeout: DEFAULT_COMPILE_TIMEOUT,
            run_timeout: DEFAULT_RUN_TIMEOUT,
        }
    }
}

impl RunEnv {
    pub fn from_process_env() -> Result<Self, DriverError> {
        Self::from_vars(std::env::vars())
    }

    pub fn from_vars(
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, DriverError> {
        let mut env = RunEnv::default();
        let mut vars: Vec<_> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with("CCC_"))
            .collect();
        vars.sort();
        for (key, value) in vars {
            match key.as_str() {
                ENV_RUNS => {
                    env.runs = value.trim().parse().ok().filter(|n| *n >= 1).ok_or(
                        DriverError::InvalidEnv {
                            var: ENV_RUNS,
                            value: value.clone(),
                        },
                    )?;
                }
                ENV_OPT_PLATFORM => {
                    env.opt_platform = value.split_whitespace().map(str::to_string).collect();
                }
                ENV_PROCESSOR_NUM => {
                    env.processor_num =
                        Some(value.trim().parse().map_err(|_| DriverError::InvalidEnv {
                            var: ENV_PROCESSOR_NUM,
                            value: value.clone(),
                        })?);
                }
                ENV_RUN_RE => {
                    env.runtime = Some(value.trim().to_string()).filter(|v| !v.is_empty());
                }
                ENV_HC_HOOK => env.hc_hook = Some(value).filter(|v| !v.trim().is_empty()),
                ENV_NOTES => env.notes.push(("NOTES".into(), value)),
                k if IGNORED_VARS.contains(&k) => {}
                _ => env.notes.push((key, value)),
            }
        }
        Ok(env)
    }

    pub fn with_runs(mut self, runs: u32) -> Self {
        self.runs = runs.max(1);
        self
    }

    /// Only native execution is supported.
    pub fn check_runtime(&self) -> Result<(), DriverError> {
        match self.runtime.as_deref() {
            None | Some("native") => Ok(()),
            Some(other) => Err(DriverError::UnsupportedRuntime(other.to_string())),
        }
    }

    pub fn notes_string(&self) -> String {
        self.notes
            .iter()
            .map(|(k, v)| {
                if k == "NOTES" {
                    v.clone()
                } else {
                    format!("{k}={v}")
                }
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

fn join_notes(parts: &[&str]) -> String {
    parts
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join("; ")
}

/// Compiles `opt` and builds the compilation record. Auxiliary flags from
/// `CCC_OPT_PLATFORM` are attached as platform flags.
pub fn compile(
    backend: &dyn Backend,
    target: &Target<'_>,
    opt: &FlagCombination,
    env: &RunEnv,
    stamper: &mut Stamper,
) -> Result<(CompilationRecord, CompileOutcome), DriverError> {
    let opt = if opt.platform_flags().is_empty() && !env.opt_platform.is_empty() {
        opt.clone().with_platform_flags(env.opt_platform.clone())?
    } else {
        opt.clone()
    };
    let outcome = backend.compile(target, &opt, env)?;
    if !outcome.success {
        return Err(DriverError::CompileFailed { log: outcome.log });
    }
    let ts = stamper.now();
    let record = CompilationRecord {
        compile_id: stamper.next_id(),
        platform_id: target.ids.platform,
        environment_id: target.ids.environment,
        compiler_id: target.ids.compiler,
        program_id: target.ids.program,
        opt,
        compile_time: quantize(outcome.compile_time),
        bin_size: outcome.bin_size,
        obj_md5: outcome.obj_md5.clone(),
        date: ts.date,
        time: ts.time,
        notes: env.notes_string(),
        extensions: BTreeMap::new(),
    };
    Ok((record, outcome))
}

/// How a run relates to the baseline.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    /// This is the baseline reference run: outputs are captured.
    Capture,
    /// Compare against the reference run `baseline_run`.
    Compare {
        baseline_run: EntityId,
        outputs: Option<&'a RunOutputs>,
    },
}

/// Runs a compiled binary `env.runs` times and builds one execution record
/// per repeat. For [`Reference::Capture`] the first record is the reference
/// run (`RUN_ID_ASSOCIATE == RUN_ID`) and later repeats point at it.
pub fn run(
    backend: &dyn Backend,
    target: &Target<'_>,
    compilation: &CompilationRecord,
    dataset: u32,
    env: &RunEnv,
    reference: Reference<'_>,
    stamper: &mut Stamper,
) -> Result<(Vec<ExecutionRecord>, RunOutcome), DriverError> {
    env.check_runtime()?;
    if !compilation.succeeded() {
        return Err(DriverError::RunFailed(format!(
            "compilation {} produced no binary",
            compilation.compile_id
        )));
    }
    let entry = target
        .program
        .dataset(dataset)
        .ok_or(DriverError::InvalidDataset {
            dataset,
            count: target.program.dataset_count(),
        })?;
    let ref_outputs = match reference {
        Reference::Capture => None,
        Reference::Compare { outputs: None, .. } => {
            return Err(DriverError::MissingReference { dataset })
        }
        Reference::Compare { outputs, .. } => outputs,
    };
    let repeats = env.runs.max(1);
    let outcome = backend.run(target, &compilation.opt, dataset, repeats, env, ref_outputs)?;
    if outcome.times.len() != repeats as usize {
        return Err(DriverError::RunFailed(format!(
            "backend returned {} timings for {repeats} repeats",
            outcome.times.len()
        )));
    }
    let output_correct = matches!(reference, Reference::Capture) || outcome.output_correct;
    let notes = join_notes(&[&outcome.notes, &env.notes_string()]);
    let mut records = Vec::with_capacity(outcome.times.len());
    let mut first = None;
    for t in &outcome.times {
        let run_id = stamper.next_id();
        let associate = match reference {
            Reference::Capture => *first.get_or_insert(run_id),
            Reference::Compare { baseline_run, .. } => baseline_run,
        };
        let ts = stamper.now();
        records.push(ExecutionRecord {
            run_id,
            run_id_associate: associate,
            compile_id: compilation.compile_id,
            compiler_id: compilation.compiler_id,
            program_id: compilation.program_id,
            platform_id: compilation.platform_id,
            environment_id: compilation.environment_id,
            dataset_number: dataset,
            bin_size: compilation.bin_size,
            output_correct,
            run_time: quantize(t.run_time),
            run_time_user: quantize(t.run_time_user),
            run_time_sys: quantize(t.run_time_sys),
            run_command_line: entry.command_line.clone(),
            profile: outcome.profile.clone(),
            hardware_counters: outcome.hardware_counters.clone(),
            processor_num: env.processor_num.unwrap_or(0),
            rank: 0,
            date: ts.date,
            time: ts.time,
            notes: notes.clone(),
            extensions: BTreeMap::new(),
        });
    }
    Ok((records, outcome))
}

/// Prior execution of an identical binary on the same dataset, if any.
pub fn skip_if_unchanged(
    new_md5: &str,
    repository: &Repository,
    program: EntityId,
    dataset: u32,
) -> Option<ExecutionRecord> {
    repository
        .cached_executions(program, new_md5, dataset)
        .first()
        .map(|e| (*e).clone())
}

/// Stores captured outputs under `dir`, one file per output name.
pub fn save_outputs(dir: &Path, outputs: &RunOutputs) -> Result<(), DriverError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, bytes) in outputs {
        let path = dir.join(encode_name(name));
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn load_outputs(dir: &Path) -> Result<Option<RunOutputs>, DriverError> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut outputs = RunOutputs::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        outputs.insert(decode_name(&entry.file_name().to_string_lossy()), bytes);
    }
    Ok(Some(outputs))
}

fn encode_name(name: &str) -> String {
    name.replace('%', "%25").replace('/', "%2F")
}

fn decode_name(name: &str) -> String {
    name.replace("%2F", "/").replace("%25", "%")
}
