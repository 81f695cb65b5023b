//! Per-directory compile/run workflow.
//!
//! `comp` compiles the program in its directory and leaves the compilation
//! packet in `_comp`; `run` executes that binary on a dataset and leaves the
//! execution packets in `_run`. A baseline run captures reference outputs
//! and its run id under `_ccc_reference/<dataset>/`; later runs are validated
//! against it.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{
    compile, io_err, load_outputs, parse_synthetic_programs, run, save_outputs, Backend,
    DriverError, ExperimentIds, Reference, RunEnv, SyntheticBackend, SyntheticError,
    SyntheticProgram, Target,
};
use crate::model::{
    CompilationRecord, CompilerDescriptor, Descriptor, EntityId, EntityKind, ExecutionRecord,
    FlagCombination, ProgramDescriptor, SystemDescriptor, TEMPLATE_FLAGS,
};
use crate::packet::{parse_fields, parse_stream, write_stream, PacketError, PacketKind};
use crate::repository::{RepoError, Repository};

pub const REFERENCE_DIR: &str = "_ccc_reference";
/// Program descriptor packet of a program directory.
pub const PROGRAM_FILE: &str = "ccc_program.pk";
/// Surrogate model of the program in a directory.
pub const SYNTHETIC_FILE: &str = "ccc_synthetic.pk";
/// Backend used by the last compilation in a directory.
pub const BACKEND_FILE: &str = "_ccc_backend";
const REFERENCE_RUN_FILE: &str = "RUN_ID";
const REFERENCE_OUTPUTS: &str = "outputs";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Repository(#[from] RepoError),
    #[error("{path}: {source}")]
    Packet {
        path: PathBuf,
        #[source]
        source: PacketError,
    },
    #[error(transparent)]
    Cbench(#[from] crate::cbench::CbenchError),
    #[error("no compilation in {0}; compile first")]
    NoCompilation(PathBuf),
    #[error("{} has neither {PROGRAM_FILE}, {SYNTHETIC_FILE} nor {}", .0.display(), crate::cbench::DATASETS_FILE)]
    NoProgram(PathBuf),
    #[error("the synthetic backend needs {SYNTHETIC_FILE} in {}", .0.display())]
    NotSynthetic(PathBuf),
    #[error("{path}: {source}")]
    Synthetic {
        path: PathBuf,
        #[source]
        source: SyntheticError,
    },
    #[error("bad backend {0:?}: expected real:<compiler>, synthetic:<compiler> or <compiler>")]
    BadBackend(String),
}

/// Result of a run step.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub executions: Vec<ExecutionRecord>,
    /// The binary was identical to an already executed one; nothing ran.
    pub cached: bool,
}

pub struct Session<'a> {
    backend: &'a dyn Backend,
    env: RunEnv,
    /// Record into the repository as well as the packet files.
    record: bool,
}

fn packet_err(path: &Path) -> impl FnOnce(PacketError) -> SessionError + '_ {
    move |source| SessionError::Packet {
        path: path.to_path_buf(),
        source,
    }
}

fn reference_dir(dir: &Path, dataset: u32) -> PathBuf {
    dir.join(REFERENCE_DIR).join(dataset.to_string())
}

/// Baseline run id and outputs captured for `dataset`, if any.
pub fn load_reference(
    dir: &Path,
    dataset: u32,
) -> Result<Option<(EntityId, super::RunOutputs)>, SessionError> {
    let rdir = reference_dir(dir, dataset);
    let id_path = rdir.join(REFERENCE_RUN_FILE);
    if !id_path.is_file() {
        return Ok(None);
    }
    let raw = fs::read_to_string(&id_path).map_err(io_err(&id_path))?;
    let id: EntityId = raw.trim().parse().map_err(|e| SessionError::Packet {
        path: id_path.clone(),
        source: PacketError::invalid("RUN_ID", raw.trim(), format!("{e}")),
    })?;
    Ok(load_outputs(&rdir.join(REFERENCE_OUTPUTS))?.map(|o| (id, o)))
}

/// The compilation left in `_comp`.
pub fn read_compilation(dir: &Path) -> Result<CompilationRecord, SessionError> {
    let path = dir.join(PacketKind::Compilation.local_filename());
    if !path.is_file() {
        return Err(SessionError::NoCompilation(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_fields(&text)
        .and_then(|p| CompilationRecord::from_packet(&p))
        .map_err(packet_err(&path))
}

/// The executions left in `_run`.
pub fn read_executions(dir: &Path) -> Result<Vec<ExecutionRecord>, SessionError> {
    let path = dir.join(PacketKind::Execution.local_filename());
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_stream(&text)
        .and_then(|ps| ps.iter().map(ExecutionRecord::from_packet).collect())
        .map_err(packet_err(&path))
}

/// Which backend compiles and runs, and under which compiler name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Real(String),
    Synthetic(String),
}

impl BackendSpec {
    pub fn parse(raw: &str) -> Result<Self, SessionError> {
        let bad = || SessionError::BadBackend(raw.to_string());
        let (kind, name) = raw.split_once(':').unwrap_or(("real", raw));
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(bad());
        }
        match kind {
            "real" => Ok(BackendSpec::Real(name.to_string())),
            "synthetic" => Ok(BackendSpec::Synthetic(name.to_string())),
            _ => Err(bad()),
        }
    }

    pub fn compiler_name(&self) -> &str {
        match self {
            BackendSpec::Real(n) | BackendSpec::Synthetic(n) => n,
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Real(n) => write!(f, "real:{n}"),
            BackendSpec::Synthetic(n) => write!(f, "synthetic:{n}"),
        }
    }
}

pub fn save_backend(dir: &Path, spec: &BackendSpec) -> Result<(), SessionError> {
    let path = dir.join(BACKEND_FILE);
    fs::write(&path, format!("{spec}\n")).map_err(io_err(&path))?;
    Ok(())
}

pub fn load_backend(dir: &Path) -> Result<Option<BackendSpec>, SessionError> {
    let path = dir.join(BACKEND_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
    BackendSpec::parse(raw.trim()).map(Some)
}

/// A program directory and what it holds.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub dir: PathBuf,
    pub program: ProgramDescriptor,
    pub synthetic: Option<SyntheticProgram>,
}

impl Workspace {
    /// Reads the surrogate model if present, else the program descriptor.
    pub fn load(dir: &Path) -> Result<Self, SessionError> {
        let synthetic_path = dir.join(SYNTHETIC_FILE);
        if synthetic_path.is_file() {
            let text = fs::read_to_string(&synthetic_path).map_err(io_err(&synthetic_path))?;
            let sp = parse_synthetic_programs(&text)
                .and_then(|mut v| {
                    if v.len() == 1 {
                        Ok(v.remove(0))
                    } else {
                        Err(SyntheticError::Invalid {
                            name: SYNTHETIC_FILE.into(),
                            reason: format!("expected one program, found {}", v.len()),
                        })
                    }
                })
                .map_err(|source| SessionError::Synthetic {
                    path: synthetic_path.clone(),
                    source,
                })?;
            let mut program = sp.descriptor();
            program.source_dir = dir.to_path_buf();
            return Ok(Self {
                dir: dir.to_path_buf(),
                program,
                synthetic: Some(sp),
            });
        }
        let path = dir.join(PROGRAM_FILE);
        if !path.is_file() {
            if dir.join(crate::cbench::DATASETS_FILE).is_file() {
                let (_, mut program) = crate::cbench::load_program_dir(dir)?;
                program.source_dir = dir.to_path_buf();
                return Ok(Self {
                    dir: dir.to_path_buf(),
                    program,
                    synthetic: None,
                });
            }
            return Err(SessionError::NoProgram(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let descriptor = parse_fields(&text)
            .and_then(|p| Descriptor::from_packet(&p))
            .map_err(packet_err(&path))?;
        let Descriptor::Program(mut program) = descriptor else {
            return Err(SessionError::Packet {
                path: path.clone(),
                source: PacketError::invalid(
                    "ENTITY_KIND",
                    descriptor.kind().as_str(),
                    "not a program",
                ),
            });
        };
        program.source_dir = dir.to_path_buf();
        Ok(Self {
            dir: dir.to_path_buf(),
            program,
            synthetic: None,
        })
    }
}

/// Descriptor of the machine we run on.
pub fn host_platform() -> SystemDescriptor {
    SystemDescriptor::new(std::env::consts::ARCH, "")
}

pub fn host_environment() -> SystemDescriptor {
    SystemDescriptor::new(std::env::consts::OS, std::env::consts::FAMILY)
}

/// Everything needed to compile and run a workspace program.
pub struct Prepared {
    pub ids: ExperimentIds,
    pub program: ProgramDescriptor,
    pub compiler: CompilerDescriptor,
    pub backend: Box<dyn Backend>,
}

impl Prepared {
    /// Registers host, compiler and program in `repo` and builds the backend.
    pub fn new(
        repo: &mut Repository,
        workspace: &Workspace,
        spec: &BackendSpec,
        seed: u64,
    ) -> Result<Self, SessionError> {
        let name = spec.compiler_name();
        let compiler = match repo.find_entity(EntityKind::Compiler, name) {
            Some(e) => e.descriptor.as_compiler().expect("compiler entity").clone(),
            None => CompilerDescriptor {
                name: name.to_string(),
                invocation_template: format!("{name} {{flags}} -o {{output}} {{sources}}"),
                flag_space_ref: String::new(),
            },
        };
        let backend: Box<dyn Backend> = match spec {
            BackendSpec::Synthetic(_) => {
                let sp = workspace
                    .synthetic
                    .clone()
                    .ok_or_else(|| SessionError::NotSynthetic(workspace.dir.clone()))?;
                Box::new(SyntheticBackend::new(vec![sp], seed).map_err(|source| {
                    SessionError::Synthetic {
                        path: workspace.dir.join(SYNTHETIC_FILE),
                        source,
                    }
                })?)
            }
            #[cfg(unix)]
            BackendSpec::Real(_) => Box::new(super::RealBackend::new()),
            #[cfg(not(unix))]
            BackendSpec::Real(_) => {
                return Err(DriverError::UnsupportedRuntime("real backend".into()).into())
            }
        };
        let ids = ExperimentIds {
            platform: repo.register_entity(Descriptor::Platform(host_platform()))?,
            environment: repo.register_entity(Descriptor::Environment(host_environment()))?,
            compiler: repo.register_entity(Descriptor::Compiler(compiler.clone()))?,
            program: repo.register_entity(Descriptor::Program(workspace.program.clone()))?,
        };
        Ok(Self {
            ids,
            program: workspace.program.clone(),
            compiler,
            backend,
        })
    }

    /// Passes `aux` to the compiler without recording it.
    pub fn with_aux_flags(mut self, aux: &str) -> Self {
        if !aux.trim().is_empty() {
            self.compiler.invocation_template = self.compiler.invocation_template.replacen(
                TEMPLATE_FLAGS,
                &format!("{TEMPLATE_FLAGS} {}", aux.trim()),
                1,
            );
        }
        self
    }

    pub fn target(&self) -> Target<'_> {
        Target {
            ids: self.ids,
            program: &self.program,
            compiler: &self.compiler,
        }
    }
}

impl<'a> Session<'a> {
    pub fn new(backend: &'a dyn Backend, env: RunEnv) -> Self {
        Self {
            backend,
            env,
            record: true,
        }
    }

    /// Off-line mode: only packet files are written.
    pub fn packets_only(mut self) -> Self {
        self.record = false;
        self
    }

    pub fn env(&self) -> &RunEnv {
        &self.env
    }

    /// Compiles and writes `_comp`. An identical earlier compilation (same
    /// flags, same binary) is reused instead of recorded again.
    pub fn comp(
        &self,
        repo: &mut Repository,
        target: &Target<'_>,
        opt: &FlagCombination,
    ) -> Result<CompilationRecord, SessionError> {
        let (fresh, _) = compile(self.backend, target, opt, &self.env, repo.stamper_mut())?;
        let existing = repo
            .compilations_with_md5(fresh.program_id, &fresh.obj_md5)
            .find(|c| {
                c.opt == fresh.opt
                    && c.compiler_id == fresh.compiler_id
                    && c.platform_id == fresh.platform_id
                    && c.environment_id == fresh.environment_id
            })
            .cloned();
        let record = match existing {
            Some(c) => c,
            None => {
                if self.record {
                    repo.record_compilation(fresh.clone())?;
                }
                fresh
            }
        };
        let dir = &target.program.source_dir;
        let path = dir.join(PacketKind::Compilation.local_filename());
        fs::write(&path, write_stream(&[record.to_packet()])).map_err(io_err(&path))?;
        Ok(record)
    }

    /// Runs the binary from the last `comp` on `dataset` and writes `_run`.
    pub fn run(
        &self,
        repo: &mut Repository,
        target: &Target<'_>,
        dataset: u32,
        baseline: bool,
    ) -> Result<RunReport, SessionError> {
        let dir = target.program.source_dir.as_path();
        let comp = read_compilation(dir)?;
        let report = if baseline {
            let (records, outcome) = run(
                self.backend,
                target,
                &comp,
                dataset,
                &self.env,
                Reference::Capture,
                repo.stamper_mut(),
            )?;
            let rdir = reference_dir(dir, dataset);
            save_outputs(&rdir.join(REFERENCE_OUTPUTS), &outcome.outputs)?;
            let id_path = rdir.join(REFERENCE_RUN_FILE);
            fs::write(&id_path, format!("{}\n", records[0].run_id)).map_err(io_err(&id_path))?;
            RunReport {
                executions: records,
                cached: false,
            }
        } else {
            let (baseline_run, outputs) =
                load_reference(dir, dataset)?.ok_or(DriverError::MissingReference { dataset })?;
            let cached: Vec<ExecutionRecord> = repo
                .cached_executions(comp.program_id, &comp.obj_md5, dataset)
                .into_iter()
                .filter(|e| e.run_id_associate == baseline_run)
                .cloned()
                .collect();
            if !cached.is_empty() {
                RunReport {
                    executions: cached,
                    cached: true,
                }
            } else {
                let (records, _) = run(
                    self.backend,
                    target,
                    &comp,
                    dataset,
                    &self.env,
                    Reference::Compare {
                        baseline_run,
                        outputs: Some(&outputs),
                    },
                    repo.stamper_mut(),
                )?;
                RunReport {
                    executions: records,
                    cached: false,
                }
            }
        };
        if self.record && !report.cached {
            for e in &report.executions {
                repo.record_execution(e.clone())?;
            }
        }
        let path = dir.join(PacketKind::Execution.local_filename());
        let packets: Vec<_> = report.executions.iter().map(|e| e.to_packet()).collect();
        fs::write(&path, write_stream(&packets)).map_err(io_err(&path))?;
        Ok(report)
    }
}
