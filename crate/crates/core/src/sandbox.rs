//! Program execution under resource limits.
//!
//! Every run gets a fresh temporary working directory, a cleared environment
//! (plus an allowlist), and its own process group so that the whole process
//! tree can be killed when the time or output limit is hit. Programs are
//! launched through a per-language command template such as
//! `python3 -I -S {file}`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TestCase;
use crate::limiter::Limiter;

pub const DEFAULT_TIME_LIMIT_S: f64 = 5.0;
pub const DEFAULT_MAX_OUTPUT_BYTES: usize = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum SandboxError {
    #[error("time limit must be positive, got {0}")]
    InvalidTimeLimit(f64),
    #[error("max output must be positive")]
    InvalidMaxOutput,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutionLimits {
    time_limit: Duration,
    memory_limit: Option<u64>,
    max_output: usize,
}

impl ExecutionLimits {
    pub fn new(time_limit_s: f64, max_output: usize) -> Result<Self, SandboxError> {
        if !(time_limit_s.is_finite() && time_limit_s > 0.0) {
            return Err(SandboxError::InvalidTimeLimit(time_limit_s));
        }
        if max_output == 0 {
            return Err(SandboxError::InvalidMaxOutput);
        }
        Ok(Self {
            time_limit: Duration::from_secs_f64(time_limit_s),
            memory_limit: None,
            max_output,
        })
    }

    pub fn with_memory_limit(mut self, bytes: Option<u64>) -> Self {
        self.memory_limit = bytes;
        self
    }

    pub fn time_limit(&self) -> Duration {
        self.time_limit
    }

    pub fn memory_limit(&self) -> Option<u64> {
        self.memory_limit
    }

    pub fn max_output(&self) -> usize {
        self.max_output
    }
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self::new(DEFAULT_TIME_LIMIT_S, DEFAULT_MAX_OUTPUT_BYTES).expect("default limits are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecStatus {
    Ok,
    RuntimeError,
    Timeout,
    OutputOverflow,
    SpawnFailure,
}

impl ExecStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExecStatus::Ok => "ok",
            ExecStatus::RuntimeError => "runtime-error",
            ExecStatus::Timeout => "timeout",
            ExecStatus::OutputOverflow => "output-overflow",
            ExecStatus::SpawnFailure => "spawn-failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    pub stdout: String,
    pub stderr: String,
    pub exit_code: Option<i32>,
    /// Wall-clock seconds.
    pub duration: f64,
}

impl ExecutionOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    fn spawn_failure(message: String) -> Self {
        Self {
            status: ExecStatus::SpawnFailure,
            stdout: String::new(),
            stderr: message,
            exit_code: None,
            duration: 0.0,
        }
    }
}

/// Strips trailing whitespace from every line, then drops trailing empty lines.
pub fn normalize_output(text: &str) -> String {
    let mut lines: Vec<&str> = text.split('\n').map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

pub fn outputs_match(actual: &str, expected: &str) -> bool {
    normalize_output(actual) == normalize_output(expected)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    /// Whitespace-separated argv template; the token `{file}` is replaced by the program path.
    pub command: String,
    #[serde(default = "Profile::default_file_name")]
    pub file_name: String,
}

impl Profile {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            file_name: Self::default_file_name(),
        }
    }

    fn default_file_name() -> String {
        "program".to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub profiles: BTreeMap<String, Profile>,
    pub time_limit_s: f64,
    pub max_output_bytes: usize,
    pub memory_limit_bytes: Option<u64>,
    pub parallelism: usize,
    pub env_allowlist: Vec<String>,
    /// Append a newline to stdin when the input does not already end with one.
    pub append_newline: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        let mut profiles = BTreeMap::new();
        profiles.insert("python".to_string(), Profile::new("python3 -I -S {file}"));
        Self {
            profiles,
            time_limit_s: DEFAULT_TIME_LIMIT_S,
            max_output_bytes: DEFAULT_MAX_OUTPUT_BYTES,
            memory_limit_bytes: None,
            parallelism: std::thread::available_parallelism().map_or(4, |n| n.get()),
            env_allowlist: vec!["PATH".to_string()],
            append_newline: true,
        }
    }
}

impl SandboxConfig {
    pub fn limits(&self) -> Result<ExecutionLimits, SandboxError> {
        Ok(ExecutionLimits::new(self.time_limit_s, self.max_output_bytes)?
            .with_memory_limit(self.memory_limit_bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRun {
    pub outcome: ExecutionOutcome,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub per_test: Vec<TestRun>,
    pub pass_count: usize,
    pub pass_rate: f64,
}

impl SuiteResult {
    pub fn first_failure(&self) -> Option<usize> {
        self.per_test.iter().position(|t| !t.matched)
    }
}

#[derive(Debug)]
pub struct Sandbox {
    config: SandboxConfig,
    env: Vec<(String, String)>,
    permits: Limiter,
}

impl Default for Sandbox {
    fn default() -> Self {
        Self::new(SandboxConfig::default())
    }
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        let env = config
            .env_allowlist
            .iter()
            .filter_map(|k| std::env::var(k).ok().map(|v| (k.clone(), v)))
            .collect();
        let permits = Limiter::new(config.parallelism);
        Self {
            config,
            env,
            permits,
        }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn has_profile(&self, language_tag: &str) -> bool {
        self.config.profiles.contains_key(language_tag)
    }

    /// Runs `source` with `input` on stdin. Never fails: problems starting the
    /// interpreter surface as `ExecStatus::SpawnFailure`.
    pub fn execute(
        &self,
        source: &str,
        language_tag: &str,
        input: &str,
        limits: &ExecutionLimits,
    ) -> ExecutionOutcome {
        let Some(profile) = self.config.profiles.get(language_tag) else {
            return ExecutionOutcome::spawn_failure(format!(
                "no interpreter profile for language tag {language_tag:?}"
            ));
        };
        let _permit = self.permits.acquire();

        let workdir = match tempfile::Builder::new().prefix("atgen-run-").tempdir() {
            Ok(d) => d,
            Err(e) => return ExecutionOutcome::spawn_failure(format!("temp dir: {e}")),
        };
        let program_path = workdir.path().join(&profile.file_name);
        if let Err(e) = std::fs::write(&program_path, source) {
            return ExecutionOutcome::spawn_failure(format!("writing program: {e}"));
        }
        let program_path = program_path.to_string_lossy().into_owned();
        let argv: Vec<String> = profile
            .command
            .split_whitespace()
            .map(|tok| tok.replace("{file}", &program_path))
            .collect();
        let Some((exe, args)) = argv.split_first() else {
            return ExecutionOutcome::spawn_failure("empty command template".to_string());
        };

        let mut cmd = Command::new(exe);
        cmd.args(args)
            .current_dir(workdir.path())
            .env_clear()
            .envs(self.env.iter().map(|(k, v)| (k, v)))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        if let Some(bytes) = limits.memory_limit {
            // SAFETY: setrlimit is async-signal-safe and touches no parent state.
            unsafe {
                cmd.pre_exec(move || {
                    let lim = libc::rlimit {
                        rlim_cur: bytes as libc::rlim_t,
                        rlim_max: bytes as libc::rlim_t,
                    };
                    if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                        return Err(std::io::Error::last_os_error());
                    }
                    Ok(())
                });
            }
        }

        let started = Instant::now();
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => return ExecutionOutcome::spawn_failure(format!("spawning {exe:?}: {e}")),
        };

        let mut stdin_bytes = input.as_bytes().to_vec();
        if self.config.append_newline && !input.ends_with('\n') {
            stdin_bytes.push(b'\n');
        }
        let mut stdin = child.stdin.take().expect("stdin piped");
        let writer = std::thread::spawn(move || {
            // EPIPE just means the program stopped reading.
            let _ = stdin.write_all(&stdin_bytes);
        });
        let overflow = Arc::new(AtomicBool::new(false));
        let out_reader = spawn_capped_reader(
            child.stdout.take().expect("stdout piped"),
            limits.max_output,
            Arc::clone(&overflow),
        );
        let err_reader = spawn_capped_reader(
            child.stderr.take().expect("stderr piped"),
            limits.max_output,
            Arc::clone(&overflow),
        );

        let (status, exit_code) = supervise(&mut child, started, limits.time_limit, &overflow);
        // Grandchildren may still hold the pipes open.
        kill_group(&child);
        let _ = writer.join();
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();

        let mut duration = started.elapsed().as_secs_f64();
        let status = match status {
            ExecStatus::Timeout => {
                duration = duration.max(limits.time_limit.as_secs_f64());
                ExecStatus::Timeout
            }
            _ if overflow.load(Ordering::SeqCst) => ExecStatus::OutputOverflow,
            s => s,
        };
        ExecutionOutcome {
            status,
            stdout: String::from_utf8_lossy(&stdout).into_owned(),
            stderr: String::from_utf8_lossy(&stderr).into_owned(),
            exit_code,
            duration,
        }
    }

    /// Runs every test; results keep test order.
    pub fn run_suite(
        &self,
        source: &str,
        language_tag: &str,
        tests: &[TestCase],
        limits: &ExecutionLimits,
    ) -> SuiteResult {
        let per_test: Vec<TestRun> = tests
            .par_iter()
            .map(|t| {
                let outcome = self.execute(source, language_tag, &t.input, limits);
                let matched = outcome.is_ok() && outputs_match(&outcome.stdout, &t.output);
                TestRun { outcome, matched }
            })
            .collect();
        let pass_count = per_test.iter().filter(|t| t.matched).count();
        let pass_rate = if tests.is_empty() {
            0.0
        } else {
            pass_count as f64 / tests.len() as f64
        };
        SuiteResult {
            per_test,
            pass_count,
            pass_rate,
        }
    }
}

fn spawn_capped_reader<R: Read + Send + 'static>(
    mut pipe: R,
    cap: usize,
    overflow: Arc<AtomicBool>,
) -> JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut captured = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(captured.len());
                    captured.extend_from_slice(&buf[..n.min(room)]);
                    if n > room {
                        overflow.store(true, Ordering::SeqCst);
                        break;
                    }
                }
            }
        }
        captured
    })
}

fn supervise(
    child: &mut Child,
    started: Instant,
    time_limit: Duration,
    overflow: &AtomicBool,
) -> (ExecStatus, Option<i32>) {
    let mut backoff = Duration::from_millis(1);
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                return match status.code() {
                    Some(0) => (ExecStatus::Ok, Some(0)),
                    code => (ExecStatus::RuntimeError, code),
                };
            }
            Ok(None) => {}
            Err(_) => {
                kill_group(child);
                let _ = child.wait();
                return (ExecStatus::RuntimeError, None);
            }
        }
        if overflow.load(Ordering::SeqCst) {
            kill_group(child);
            let _ = child.wait();
            return (ExecStatus::OutputOverflow, None);
        }
        let elapsed = started.elapsed();
        if elapsed >= time_limit {
            kill_group(child);
            let _ = child.wait();
            return (ExecStatus::Timeout, None);
        }
        std::thread::sleep(backoff.min(time_limit - elapsed));
        backoff = (backoff * 2).min(Duration::from_millis(10));
    }
}

fn kill_group(child: &Child) {
    let pgid = child.id() as libc::pid_t;
    // SAFETY: plain syscall; ESRCH for an already-reaped group is ignored.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}
