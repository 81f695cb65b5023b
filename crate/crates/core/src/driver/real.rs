//! Backend that shells out to an installed compiler and runs the binary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use fs2::FileExt;
use md5::{Digest as _, Md5};

use super::{
    io_err, Backend, Capability, CompileOutcome, DriverError, RunEnv, RunOutcome, RunOutputs,
    RunTimes, Target,
};
use crate::cbench::{output_files, LOOP_WRAPPER_VAR};
use crate::model::{FlagCombination, TEMPLATE_FLAGS, TEMPLATE_OUTPUT, TEMPLATE_SOURCES};

const SOURCE_EXTENSIONS: &[&str] = &["c", "cc", "cpp", "cxx", "C", "f", "f90", "f95", "for"];
const DIR_LOCK: &str = ".ccc_lock";

/// Compiles via the compiler's invocation template inside the program's
/// source directory and runs `./<binary> <dataset command line>`.
#[derive(Debug, Clone)]
pub struct RealBackend {
    binary_name: String,
}

impl Default for RealBackend {
    fn default() -> Self {
        Self {
            binary_name: "a.out".into(),
        }
    }
}

struct Finished {
    status: libc::c_int,
    wall: f64,
    user: f64,
    sys: f64,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
}

impl Finished {
    fn success(&self) -> bool {
        libc::WIFEXITED(self.status) && libc::WEXITSTATUS(self.status) == 0
    }

    fn describe(&self) -> String {
        let how = if libc::WIFEXITED(self.status) {
            format!("exit status {}", libc::WEXITSTATUS(self.status))
        } else if libc::WIFSIGNALED(self.status) {
            format!("killed by signal {}", libc::WTERMSIG(self.status))
        } else {
            format!("wait status {}", self.status)
        };
        let err = String::from_utf8_lossy(&self.stderr);
        if err.trim().is_empty() {
            how
        } else {
            format!("{how}: {}", err.trim())
        }
    }
}

fn timeval_secs(tv: libc::timeval) -> f64 {
    tv.tv_sec as f64 + tv.tv_usec as f64 / 1e6
}

fn reader(mut pipe: impl Read + Send + 'static) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    })
}

/// Spawns `cmd` in its own process group and waits up to `timeout`. On
/// timeout the whole group is killed and reaped. Returns the child pid
/// alongside the result.
fn run_command(
    cmd: &mut Command,
    timeout: Duration,
    what: &'static str,
) -> (Option<u32>, Result<Finished, DriverError>) {
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let start = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            return (
                None,
                Err(DriverError::RunFailed(format!("cannot spawn {what}: {e}"))),
            )
        }
    };
    let pid = child.id();
    let out = reader(child.stdout.take().expect("piped"));
    let err = reader(child.stderr.take().expect("piped"));

    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut status: libc::c_int = 0;
        // SAFETY: zeroed rusage is a valid out-parameter.
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        loop {
            // SAFETY: pid is our unreaped child; pointers are valid for the call.
            let r = unsafe { libc::wait4(pid as libc::pid_t, &mut status, 0, &mut usage) };
            if r == -1 && std::io::Error::last_os_error().raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            let _ = tx.send((r, status, usage, Instant::now()));
            break;
        }
    });

    let waited = match rx.recv_timeout(timeout) {
        Ok(w) => Ok(w),
        Err(_) => {
            // SAFETY: signalling our own process group.
            unsafe {
                libc::killpg(pid as libc::pid_t, libc::SIGKILL);
            }
            let _ = rx.recv();
            Err(DriverError::Timeout {
                what,
                seconds: timeout.as_secs(),
            })
        }
    };
    // the group leader is gone; make sure no stragglers keep the pipes open
    // SAFETY: as above.
    unsafe {
        libc::killpg(pid as libc::pid_t, libc::SIGKILL);
    }
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    let result = waited.and_then(|(r, status, usage, end)| {
        if r == -1 {
            return Err(DriverError::RunFailed(format!(
                "waiting for {what}: {}",
                std::io::Error::last_os_error()
            )));
        }
        Ok(Finished {
            status,
            wall: (end - start).as_secs_f64(),
            user: timeval_secs(usage.ru_utime),
            sys: timeval_secs(usage.ru_stime),
            stdout,
            stderr,
        })
    });
    (Some(pid), result)
}

fn shell(command: &str, dir: &Path) -> Command {
    let mut cmd = Command::new("sh");
    cmd.arg("-c").arg(command).current_dir(dir);
    cmd
}

fn on_path(program: &str, dir: &Path) -> bool {
    if program.contains('/') {
        return dir.join(program).exists();
    }
    std::env::var_os("PATH")
        .is_some_and(|paths| std::env::split_paths(&paths).any(|p| p.join(program).is_file()))
}

fn source_files(dir: &Path) -> Result<Vec<String>, DriverError> {
    let mut out: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| SOURCE_EXTENSIONS.contains(&e))
        })
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    out.sort();
    Ok(out)
}

struct DirLock(fs::File);

fn lock_dir(dir: &Path) -> Result<DirLock, DriverError> {
    let path = dir.join(DIR_LOCK);
    let f = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(io_err(&path))?;
    f.lock_exclusive().map_err(io_err(&path))?;
    Ok(DirLock(f))
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = FileExt::unlock(&self.0);
    }
}

fn parse_counters(text: &str) -> BTreeMap<String, i64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| Some((k.trim().to_string(), v.trim().parse().ok()?)))
        .collect()
}

impl RealBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_binary_name(mut self, name: impl Into<String>) -> Self {
        self.binary_name = name.into();
        self
    }

    fn binary_path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.binary_name)
    }

    fn collect_outputs(&self, dir: &Path, stdout: Vec<u8>) -> RunOutputs {
        let mut outputs = RunOutputs::new();
        outputs.insert("stdout".into(), stdout);
        for name in output_files(dir) {
            if let Ok(bytes) = fs::read(dir.join(&name)) {
                outputs.insert(name, bytes);
            }
        }
        outputs
    }
}

impl Backend for RealBackend {
    fn name(&self) -> &str {
        "native"
    }

    fn capabilities(&self) -> BTreeSet<Capability> {
        [
            Capability::Compile,
            Capability::Run,
            Capability::OutputValidation,
            Capability::WallClockTiming,
            Capability::CpuTiming,
            Capability::HardwareCounters,
        ]
        .into()
    }

    fn compile(
        &self,
        target: &Target<'_>,
        opt: &FlagCombination,
        env: &RunEnv,
    ) -> Result<CompileOutcome, DriverError> {
        let dir = target.program.source_dir.as_path();
        let _lock = lock_dir(dir)?;
        let program = target
            .compiler
            .invocation_template
            .split_whitespace()
            .next()
            .unwrap_or_default()
            .to_string();
        if !on_path(&program, dir) {
            return Err(DriverError::CompilerNotFound(program));
        }
        let sources = source_files(dir)?;
        if sources.is_empty() {
            return Err(DriverError::CompileFailed {
                log: format!("no source files in {}", dir.display()),
            });
        }
        let command = target
            .compiler
            .invocation_template
            .replace(TEMPLATE_FLAGS, &opt.command_line_flags().join(" "))
            .replace(TEMPLATE_OUTPUT, &self.binary_name)
            .replace(TEMPLATE_SOURCES, &sources.join(" "));
        let binary = self.binary_path(dir);
        if binary.exists() {
            fs::remove_file(&binary).map_err(io_err(&binary))?;
        }
        let (_, result) = run_command(
            &mut shell(&command, dir),
            env.compile_timeout,
            "compilation",
        );
        let done = result?;
        let mut log = String::from_utf8_lossy(&done.stdout).into_owned();
        log.push_str(&String::from_utf8_lossy(&done.stderr));
        if !done.success() || !binary.is_file() {
            return Ok(CompileOutcome {
                success: false,
                compile_time: done.wall,
                bin_size: 0,
                obj_md5: String::new(),
                log: format!("$ {command}\n{log}"),
            });
        }
        let bytes = fs::read(&binary).map_err(io_err(&binary))?;
        Ok(CompileOutcome {
            success: !bytes.is_empty(),
            compile_time: done.wall,
            bin_size: bytes.len() as u64,
            obj_md5: Md5::digest(&bytes)
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect(),
            log,
        })
    }

    fn run(
        &self,
        target: &Target<'_>,
        _opt: &FlagCombination,
        dataset: u32,
        repeats: u32,
        env: &RunEnv,
        reference: Option<&RunOutputs>,
    ) -> Result<RunOutcome, DriverError> {
        let dir = target.program.source_dir.as_path();
        let entry = target
            .program
            .dataset(dataset)
            .ok_or(DriverError::InvalidDataset {
                dataset,
                count: target.program.dataset_count(),
            })?;
        let _lock = lock_dir(dir)?;
        if !self.binary_path(dir).is_file() {
            return Err(DriverError::RunFailed(format!(
                "{} not found in {}",
                self.binary_name,
                dir.display()
            )));
        }
        let pin = env
            .processor_num
            .filter(|_| on_path("taskset", dir))
            .map(|n| format!("taskset -c {n} "))
            .unwrap_or_default();
        let command = format!("exec {pin}./{} {}", self.binary_name, entry.command_line);
        let mut times = Vec::with_capacity(repeats as usize);
        let mut output_correct = true;
        let mut outputs = RunOutputs::new();
        for _ in 0..repeats.max(1) {
            let mut cmd = shell(&command, dir);
            cmd.env(LOOP_WRAPPER_VAR, entry.loop_wrapper_bound.to_string());
            let (_, result) = run_command(&mut cmd, env.run_timeout, "run");
            let done = result?;
            if !done.success() {
                return Err(DriverError::RunFailed(done.describe()));
            }
            times.push(RunTimes {
                run_time: done.wall,
                run_time_user: done.user,
                run_time_sys: done.sys,
            });
            outputs = self.collect_outputs(dir, done.stdout);
            if let Some(r) = reference {
                output_correct &= *r == outputs;
            }
        }
        let mut hardware_counters = BTreeMap::new();
        if let Some(hook) = &env.hc_hook {
            let (_, result) = run_command(&mut shell(hook, dir), env.run_timeout, "counter hook");
            match result {
                Ok(done) if done.success() => {
                    hardware_counters = parse_counters(&String::from_utf8_lossy(&done.stdout))
                }
                Ok(done) => log::warn!("counter hook failed: {}", done.describe()),
                Err(e) => log::warn!("counter hook failed: {e}"),
            }
        }
        Ok(RunOutcome {
            times,
            output_correct,
            outputs,
            profile: BTreeMap::new(),
            hardware_counters,
            notes: String::new(),
        })
    }
}
