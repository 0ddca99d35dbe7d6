//! Child-process execution of pipelines, sequentially or fanned out across
//! shards.
//!
//! Stages are connected stdout-to-stdin exactly as a shell pipe would, with
//! stdin of the first stage closed (the corpus is a file operand). Every
//! child runs under LC_ALL=C so collation is bytewise.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::classify::ReductionStrategy;
use crate::pipeline::Pipeline;
use crate::shards::ShardSet;

/// Exit code recorded for a pipeline killed by the per-command timeout.
pub const TIMEOUT_EXIT_CODE: i32 = 124;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("failed to spawn {tool}: {source}")]
    SpawnFailure {
        tool: String,
        #[source]
        source: std::io::Error,
    },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic execution environment for child processes.
#[derive(Debug, Clone)]
pub struct ExecEnv {
    /// Per-command wall-clock timeout.
    pub timeout: Duration,
    /// Maximum shard executions in flight during fan-out.
    pub max_procs: usize,
    /// Per-result stdout capture cap in bytes; a breach marks the result.
    pub output_cap: usize,
    /// Apply the local `uniq` step for SORTHEAD shard runs. Disabling this
    /// reproduces a known-unsound variant; it exists for the differential
    /// harness only.
    pub sorthead_local_uniq: bool,
}

impl Default for ExecEnv {
    fn default() -> Self {
        ExecEnv {
            timeout: Duration::from_secs(30),
            max_procs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4),
            output_cap: 64 << 20,
            sorthead_local_uniq: true,
        }
    }
}

/// Captured outcome of one pipeline run (one shard, or the full corpus).
#[derive(Debug, Clone)]
pub struct ShardResult {
    /// 0-based shard index, or -1 for a sequential run.
    pub shard_index: i32,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub exit_code: i32,
    pub duration_ms: f64,
    /// True when stdout hit the capture cap and is incomplete.
    pub capped: bool,
}

/// Build the argv for one stage, rebinding the corpus operand and injecting
/// deterministic performance flags for rg.
fn stage_argv(p: &Pipeline, stage_idx: usize, target: &Path) -> Vec<String> {
    let st = &p.stages[stage_idx];
    let mut argv = Vec::with_capacity(st.args.len() + 3);
    argv.push(st.tool.clone());
    if st.tool == "rg" {
        for flag in ["--no-config", "--mmap"] {
            if !st.args.iter().any(|a| a == flag) {
                argv.push(flag.to_string());
            }
        }
    }
    for (ai, arg) in st.args.iter().enumerate() {
        if stage_idx == 0 && p.corpus_arg == Some(ai) {
            argv.push(target.to_string_lossy().into_owned());
        } else {
            argv.push(arg.clone());
        }
    }
    argv
}

/// For SORTHEAD shard runs with local uniq disabled, drop the uniq stage.
fn local_stages(p: &Pipeline, strategy: &ReductionStrategy, env: &ExecEnv) -> Vec<usize> {
    let all: Vec<usize> = (0..p.stages.len()).collect();
    if let ReductionStrategy::SortHead { with_uniq: true, .. } = strategy {
        if !env.sorthead_local_uniq {
            return all.into_iter().filter(|&i| p.stages[i].tool != "uniq").collect();
        }
    }
    all
}

fn spawn_stage(argv: &[String], stdin: Stdio) -> Result<Child, ExecError> {
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .env("LC_ALL", "C")
        .stdin(stdin)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    // Children must see the default SIGPIPE disposition so early pipe
    // closure (head truncation) terminates upstream stages quietly.
    unsafe {
        cmd.pre_exec(|| {
            libc::signal(libc::SIGPIPE, libc::SIG_DFL);
            Ok(())
        });
    }
    cmd.spawn().map_err(|e| ExecError::SpawnFailure { tool: argv[0].clone(), source: e })
}

/// Read a stream to its end, stopping at `cap` bytes. Returns (bytes, capped).
fn drain_capped(mut stream: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut out = Vec::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        match stream.read(&mut buf) {
            Ok(0) => return (out, false),
            Ok(n) => {
                if out.len() + n > cap {
                    out.extend_from_slice(&buf[..cap - out.len()]);
                    return (out, true);
                }
                out.extend_from_slice(&buf[..n]);
            }
            Err(_) => return (out, false),
        }
    }
}

/// Exit code of a single stage: real exit code, or 0 for signal-terminated
/// stages (SIGPIPE from downstream truncation is normal operation).
fn stage_code(status: ExitStatus) -> i32 {
    status.code().unwrap_or(0)
}

/// Aggregate stage statuses into the pipeline's exit code. Tool errors
/// dominate; otherwise the last search stage decides match/no-match.
///
/// One wrinkle: `head` is the only whitelisted tool that stops reading
/// early, and rg reports a plain exit 1 (not a SIGPIPE death) when its
/// reader goes away — indistinguishable from no-match, and racy because it
/// depends on whether the output fit the pipe buffer. When a `head` sits
/// downstream of the last search stage, nonempty final output proves a
/// match, so it overrides that ambiguous code; empty output means `head`
/// never closed early and the search stage's code is genuine.
fn pipeline_exit(p: &Pipeline, stage_indexes: &[usize], codes: &[i32], stdout: &[u8]) -> i32 {
    if codes.iter().any(|&c| c >= 2) {
        return 2;
    }
    let last_search = stage_indexes
        .iter()
        .enumerate()
        .rev()
        .find(|(_, &si)| matches!(p.stages[si].tool.as_str(), "rg" | "grep"));
    match last_search {
        Some((pos, _)) => {
            let truncator_after =
                stage_indexes[pos + 1..].iter().any(|&si| p.stages[si].tool == "head");
            if truncator_after && !stdout.is_empty() {
                0
            } else {
                codes[pos]
            }
        }
        None => *codes.last().unwrap_or(&0),
    }
}

/// Run the given stages of `p` as a process chain against `target`.
fn run_chain(
    p: &Pipeline,
    stage_indexes: &[usize],
    target: &Path,
    env: &ExecEnv,
    shard_index: i32,
) -> Result<ShardResult, ExecError> {
    let start = Instant::now();
    let mut children: Vec<Child> = Vec::with_capacity(stage_indexes.len());
    for (pos, &si) in stage_indexes.iter().enumerate() {
        let argv = stage_argv(p, si, target);
        let stdin = if pos == 0 {
            Stdio::null()
        } else {
            let prev = children.last_mut().unwrap();
            Stdio::from(prev.stdout.take().expect("piped stdout"))
        };
        children.push(spawn_stage(&argv, stdin)?);
    }

    let cap = env.output_cap;
    let final_stdout = children.last_mut().unwrap().stdout.take().expect("piped stdout");
    let stderr_handles: Vec<_> =
        children.iter_mut().map(|c| c.stderr.take().expect("piped stderr")).collect();

    let deadline = start + env.timeout;
    let (stdout, capped, stderrs, timed_out) = std::thread::scope(|scope| {
        let out_handle = scope.spawn(move || drain_capped(final_stdout, cap));
        let err_handles: Vec<_> = stderr_handles
            .into_iter()
            .map(|h| scope.spawn(move || drain_capped(h, cap).0))
            .collect();

        // Poll children against the deadline; kill the whole chain on expiry.
        let mut timed_out = false;
        loop {
            let all_done = children.iter_mut().all(|c| matches!(c.try_wait(), Ok(Some(_))));
            if all_done {
                break;
            }
            if Instant::now() >= deadline {
                timed_out = true;
                for c in children.iter_mut() {
                    let _ = c.kill();
                }
                break;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        let (stdout, capped) = out_handle.join().expect("stdout reader");
        let stderrs: Vec<Vec<u8>> =
            err_handles.into_iter().map(|h| h.join().expect("stderr reader")).collect();
        (stdout, capped, stderrs, timed_out)
    });

    let mut codes = Vec::with_capacity(children.len());
    for c in children.iter_mut() {
        codes.push(stage_code(c.wait()?));
    }

    let exit_code = if timed_out {
        TIMEOUT_EXIT_CODE
    } else {
        pipeline_exit(p, stage_indexes, &codes, &stdout)
    };
    let stderr = stderrs.concat();
    Ok(ShardResult {
        shard_index,
        stdout,
        stderr,
        exit_code,
        duration_ms: start.elapsed().as_secs_f64() * 1000.0,
        capped,
    })
}

/// Run the full pipeline sequentially on the whole corpus. This path is the
/// oracle for all equivalence testing.
pub fn exec_sequential(p: &Pipeline, corpus: &Path, env: &ExecEnv) -> Result<ShardResult, ExecError> {
    let all: Vec<usize> = (0..p.stages.len()).collect();
    run_chain(p, &all, corpus, env, -1)
}

/// Run the shard-local variant of a classified pipeline on one shard.
pub fn exec_on_shard(
    p: &Pipeline,
    strategy: &ReductionStrategy,
    shard: &Path,
    env: &ExecEnv,
    shard_index: i32,
) -> Result<ShardResult, ExecError> {
    debug_assert!(!matches!(strategy, ReductionStrategy::Sequential));
    let stages = local_stages(p, strategy, env);
    run_chain(p, &stages, shard, env, shard_index)
}

/// Launch `exec_on_shard` across all shards with bounded parallelism.
/// Results come back in shard order regardless of completion order.
pub fn fan_out(
    p: &Pipeline,
    strategy: &ReductionStrategy,
    ss: &ShardSet,
    env: &ExecEnv,
) -> Result<Vec<ShardResult>, ExecError> {
    let paths = ss.shard_paths();
    let n = paths.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ShardResult, ExecError>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let workers = env.max_procs.max(1).min(n.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let res = exec_on_shard(p, strategy, &paths[i], env, i as i32);
                slots.lock().unwrap()[i] = Some(res);
            });
        }
    });

    let mut out = Vec::with_capacity(n);
    for slot in slots.into_inner().unwrap() {
        out.push(slot.expect("worker filled slot")?);
    }
    Ok(out)
}

/// Aggregate per-shard exit codes: tool errors dominate, any match wins,
/// uniform no-match otherwise.
pub fn aggregate_exit(results: &[ShardResult]) -> i32 {
    if results.iter().any(|r| r.exit_code >= 2) {
        return 2;
    }
    if results.iter().any(|r| r.exit_code == 0) {
        return 0;
    }
    1
}

/// Concatenate, in shard order, the first occurrence of each distinct
/// stderr byte string.
pub fn dedup_stderr(results: &[ShardResult]) -> Vec<u8> {
    let mut seen: Vec<&[u8]> = Vec::new();
    let mut out = Vec::new();
    for r in results {
        if r.stderr.is_empty() {
            continue;
        }
        if !seen.contains(&r.stderr.as_slice()) {
            out.extend_from_slice(&r.stderr);
            seen.push(&r.stderr);
        }
    }
    out
}
