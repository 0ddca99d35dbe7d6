//! Operator CLI for the shardpipe execution engine.
//!
//! Exit-code map (shared by every subcommand):
//!   0 ok / match
//!   1 no match / negative result
//!   2 command, parse, or tool error
//!   3 transport error (daemon unreachable, protocol failure)
//!   4 internal or verification error

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use shardpipe::daemon::{self, RequestFrame};
use shardpipe::engine::{truncate_output, EngineError, Outcome};
use shardpipe::harness;
use shardpipe::shards::{self, ShardSet};
use shardpipe::{Engine, EngineConfig, ExecEnv};

const EXIT_OK: u8 = 0;
const EXIT_NO_MATCH: u8 = 1;
const EXIT_COMMAND: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

const EXIT_MAP_HELP: &str = "Exit codes:\n  \
    0  ok / match\n  \
    1  no match / negative result\n  \
    2  command, parse, or tool error\n  \
    3  transport error\n  \
    4  internal or verification error";

#[derive(Parser)]
#[command(
    name = "shardpipe",
    version,
    about = "Sharded-parallel execution engine for whitelisted Unix search pipelines",
    after_help = EXIT_MAP_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct CorpusArgs {
    /// Corpus file (one record per line).
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding the shard files and manifest.
    #[arg(long, env = "SHARDPIPE_SHARD_DIR")]
    shard_dir: Option<PathBuf>,
}

impl CorpusArgs {
    fn shard_dir(&self) -> PathBuf {
        self.shard_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{}.shards", self.corpus.display())))
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ExecMode {
    Sequential,
    Parallel,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split the corpus into line-aligned shards (idempotent).
    Shard {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Number of shards.
        #[arg(long, short = 's')]
        shards: u64,
        /// Emit the manifest summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Re-check shard digests and line counts against the manifest.
    Verify {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        json: bool,
    },
    /// Read every shard end-to-end to warm the page cache.
    Warm {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        json: bool,
    },
    /// Run one pipeline against the corpus.
    Exec {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Execution path: the parallel engine, the sequential oracle, or
        /// both with a byte-for-byte comparison.
        #[arg(long, value_enum, default_value = "parallel")]
        mode: ExecMode,
        /// Whitespace-token budget for stdout; omitted = no truncation.
        #[arg(long)]
        max_output_tokens: Option<u64>,
        /// Per-command timeout in seconds.
        #[arg(long, default_value = "30")]
        timeout: u64,
        /// Emit the full response (stdout, exit code, telemetry) as JSON.
        #[arg(long)]
        json: bool,
        /// The pipeline, quoted as one argument.
        command: String,
    },
    /// Serve the engine on a Unix socket until SIGINT/SIGTERM.
    Serve {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Socket path.
        #[arg(long, env = "SHARDPIPE_SOCKET")]
        socket: PathBuf,
        /// Append one telemetry record per request to this JSON-lines file.
        #[arg(long)]
        telemetry: Option<PathBuf>,
        /// Per-command timeout in seconds.
        #[arg(long, default_value = "30")]
        timeout: u64,
    },
    /// Send one framed request to a running daemon.
    Client {
        /// Socket path.
        #[arg(long, env = "SHARDPIPE_SOCKET")]
        socket: PathBuf,
        /// Whitespace-token budget for the response stdout.
        #[arg(long)]
        max_output_tokens: Option<u64>,
        /// Per-request timeout in seconds.
        #[arg(long)]
        timeout: Option<u64>,
        #[arg(long)]
        json: bool,
        /// The pipeline, quoted as one argument.
        command: String,
    },
    /// Differential fuzzing: generated pipelines, parallel vs sequential.
    FuzzDiff {
        /// Number of pipelines to draw.
        #[arg(long, default_value = "500")]
        seeds: u64,
        /// Lines in the generated corpus.
        #[arg(long, default_value = "100000")]
        lines: u64,
        /// Shard counts to compare at, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,8")]
        shards: Vec<u64>,
        /// RNG seed for corpus and pipeline generation.
        #[arg(long, default_value = "42")]
        seed: u64,
        /// Scratch directory (kept on failure for the repro bundles).
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Latency vs shard count on a synthetic corpus.
    Bench {
        /// Synthetic corpus size in bytes (floor for meaningful numbers: 1 GiB).
        #[arg(long, default_value_t = 1u64 << 30)]
        bytes: u64,
        /// Shard counts to measure, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        shards: Vec<u64>,
        /// Timed runs per query per shard count.
        #[arg(long, default_value = "5")]
        repeats: u64,
        /// Full-scan queries; defaults to fixed-string scans for phrases
        /// planted in the synthetic corpus.
        #[arg(long)]
        query: Vec<String>,
        /// Where to place the corpus and shards (reused across runs).
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Also emit one JSON record per shard count.
        #[arg(long)]
        json: bool,
    },
    /// Score answers: token F1, exact match, and gated reward.
    ///
    /// Input is JSON lines; each record carries "references" (list of
    /// strings) plus either "prediction" (a bare answer) or "trajectory"
    /// (a full tagged transcript, scored through the format gate).
    /// Normalization lowercases, strips punctuation — hyphens are removed
    /// without inserting a space, so "multi-hop" becomes the single token
    /// "multihop" — and drops the articles a/an/the.
    Score {
        /// Input file; "-" reads stdin.
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Cmd::Shard { corpus, shards, json } => cmd_shard(&corpus, shards, json),
        Cmd::Verify { corpus, json } => cmd_verify(&corpus, json),
        Cmd::Warm { corpus, json } => cmd_warm(&corpus, json),
        Cmd::Exec { corpus, mode, max_output_tokens, timeout, json, command } => {
            cmd_exec(&corpus, mode, max_output_tokens, timeout, json, &command)
        }
        Cmd::Serve { corpus, socket, telemetry, timeout } => {
            cmd_serve(&corpus, &socket, telemetry, timeout)
        }
        Cmd::Client { socket, max_output_tokens, timeout, json, command } => {
            cmd_client(&socket, max_output_tokens, timeout, json, &command)
        }
        Cmd::FuzzDiff { seeds, lines, shards, seed, work_dir, json } => {
            cmd_fuzz_diff(seeds, lines, &shards, seed, work_dir, json)
        }
        Cmd::Bench { bytes, shards, repeats, query, work_dir, json } => {
            cmd_bench(bytes, &shards, repeats, &query, work_dir, json)
        }
        Cmd::Score { input, json } => cmd_score(&input, json),
    };
    ExitCode::from(code)
}

fn fail(code: u8, msg: impl std::fmt::Display) -> u8 {
    eprintln!("shardpipe: {msg}");
    code
}

fn load_shardset(args: &CorpusArgs) -> Result<ShardSet, u8> {
    ShardSet::load(&args.corpus, &args.shard_dir())
        .map_err(|e| fail(EXIT_INTERNAL, format!("loading shard set: {e}")))
}

fn cmd_shard(args: &CorpusArgs, s: u64, json: bool) -> u8 {
    let dir = args.shard_dir();
    match shards::shard(&args.corpus, s, &dir) {
        Ok(ss) => {
            if json {
                println!("{}", serde_json::to_string(&ss.manifest).unwrap());
            } else {
                println!(
                    "sharded {} into {} shards at {} ({} lines, {} bytes)",
                    args.corpus.display(),
                    ss.count(),
                    dir.display(),
                    ss.manifest.corpus_lines,
                    ss.manifest.corpus_bytes
                );
            }
            EXIT_OK
        }
        Err(e) => fail(EXIT_INTERNAL, e),
    }
}

fn cmd_verify(args: &CorpusArgs, json: bool) -> u8 {
    let ss = match load_shardset(args) {
        Ok(ss) => ss,
        Err(code) => return code,
    };
    match shards::verify(&ss) {
        Ok(ok) => {
            if json {
                println!("{{\"verified\":{ok}}}");
            } else if ok {
                println!("verify OK: {} shards match the manifest", ss.count());
            } else {
                println!("verify FAILED: shard contents do not match the manifest");
            }
            if ok {
                EXIT_OK
            } else {
                EXIT_NO_MATCH
            }
        }
        Err(e) => fail(EXIT_INTERNAL, e),
    }
}

fn cmd_warm(args: &CorpusArgs, json: bool) -> u8 {
    let ss = match load_shardset(args) {
        Ok(ss) => ss,
        Err(code) => return code,
    };
    match shards::warm(&ss) {
        Ok(bytes) => {
            if json {
                println!("{{\"bytes_read\":{bytes}}}");
            } else {
                println!("warmed {} shards: {} bytes read", ss.count(), bytes);
            }
            EXIT_OK
        }
        Err(e) => fail(EXIT_INTERNAL, e),
    }
}

fn build_engine(args: &CorpusArgs, shardset: Option<ShardSet>, timeout: u64) -> Engine {
    let env = ExecEnv { timeout: Duration::from_secs(timeout), ..ExecEnv::default() };
    Engine::new(
        EngineConfig {
            corpus_path: args.corpus.clone(),
            corpus_name: "corpus.jsonl".to_string(),
            env,
        },
        shardset,
    )
}

/// Map an engine outcome to the process exit code: an empty result is
/// reported as no-match even when every stage exited 0 (e.g. a filter
/// chain that kept nothing).
fn exec_exit(outcome: &Outcome) -> u8 {
    if outcome.exit_code == 0 && outcome.stdout.is_empty() {
        return EXIT_NO_MATCH;
    }
    outcome.exit_code.clamp(0, u8::MAX as i32) as u8
}

fn engine_error_exit(e: &EngineError) -> u8 {
    match e {
        EngineError::Parse(_) => EXIT_COMMAND,
        EngineError::Exec(_) => EXIT_INTERNAL,
    }
}

#[derive(Serialize)]
struct ExecJson<'a> {
    stdout: String,
    stderr: String,
    exit_code: i32,
    truncated: bool,
    telemetry: &'a shardpipe::Telemetry,
}

fn print_outcome(outcome: &Outcome, max_tokens: Option<u64>, json: bool) -> u8 {
    let (stdout, truncated) = match max_tokens {
        Some(budget) => truncate_output(&outcome.stdout, budget.max(1)),
        None => (outcome.stdout.clone(), false),
    };
    if json {
        let record = ExecJson {
            stdout: String::from_utf8_lossy(&stdout).into_owned(),
            stderr: String::from_utf8_lossy(&outcome.stderr).into_owned(),
            exit_code: outcome.exit_code,
            truncated,
            telemetry: &outcome.telemetry,
        };
        println!("{}", serde_json::to_string(&record).unwrap());
    } else {
        let _ = io::stdout().write_all(&stdout);
        let _ = io::stderr().write_all(&outcome.stderr);
    }
    exec_exit(outcome)
}

fn cmd_exec(
    args: &CorpusArgs,
    mode: ExecMode,
    max_tokens: Option<u64>,
    timeout: u64,
    json: bool,
    command: &str,
) -> u8 {
    let shardset = match mode {
        ExecMode::Sequential => None,
        ExecMode::Parallel | ExecMode::Both => match load_shardset(args) {
            Ok(ss) => Some(ss),
            Err(code) => return code,
        },
    };
    let engine = build_engine(args, shardset, timeout);

    match mode {
        ExecMode::Parallel => match engine.run(command) {
            Ok(outcome) => print_outcome(&outcome, max_tokens, json),
            Err(e) => fail(engine_error_exit(&e), e),
        },
        ExecMode::Sequential => match engine.exec_sequential(command) {
            Ok(r) => {
                let outcome = Outcome {
                    exit_code: shardpipe::exec::aggregate_exit(std::slice::from_ref(&r)),
                    stdout: r.stdout,
                    stderr: r.stderr,
                    telemetry: sequential_telemetry(command),
                };
                print_outcome(&outcome, max_tokens, json)
            }
            Err(e) => fail(engine_error_exit(&e), e),
        },
        ExecMode::Both => {
            let parallel = match engine.run(command) {
                Ok(o) => o,
                Err(e) => return fail(engine_error_exit(&e), e),
            };
            let sequential = match engine.exec_sequential(command) {
                Ok(r) => r,
                Err(e) => return fail(engine_error_exit(&e), e),
            };
            let seq_exit =
                shardpipe::exec::aggregate_exit(std::slice::from_ref(&sequential));
            let matched =
                parallel.stdout == sequential.stdout && parallel.exit_code == seq_exit;
            println!("--- parallel (exit {}) ---", parallel.exit_code);
            let _ = io::stdout().write_all(&parallel.stdout);
            println!("--- sequential (exit {seq_exit}) ---");
            let _ = io::stdout().write_all(&sequential.stdout);
            println!("{}", if matched { "MATCH" } else { "MISMATCH" });
            if matched {
                exec_exit(&parallel)
            } else {
                EXIT_INTERNAL
            }
        }
    }
}

fn sequential_telemetry(command: &str) -> shardpipe::Telemetry {
    shardpipe::Telemetry {
        canonical_command: command.to_string(),
        strategy: "sequential".to_string(),
        line_limit: None,
        shard_count: 0,
        fallback: false,
        parse_ms: 0.0,
        classify_ms: 0.0,
        exec_ms: 0.0,
        reduce_ms: 0.0,
        per_shard_ms: Vec::new(),
    }
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    SHUTDOWN.store(true, Ordering::SeqCst);
}

fn cmd_serve(args: &CorpusArgs, socket: &Path, telemetry: Option<PathBuf>, timeout: u64) -> u8 {
    let ss = match load_shardset(args) {
        Ok(ss) => ss,
        Err(code) => return code,
    };
    let engine = std::sync::Arc::new(build_engine(args, Some(ss.clone()), timeout));
    eprintln!(
        "shardpipe: serving {} ({} shards) on {}",
        args.corpus.display(),
        ss.count(),
        socket.display()
    );
    let handle = match daemon::serve(socket, engine, Some(&ss), telemetry) {
        Ok(h) => h,
        Err(e) => return fail(EXIT_INTERNAL, e),
    };
    unsafe {
        libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
        libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
    }
    while !SHUTDOWN.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    eprintln!("shardpipe: shutting down");
    handle.shutdown();
    EXIT_OK
}

fn cmd_client(
    socket: &Path,
    max_output_tokens: Option<u64>,
    timeout: Option<u64>,
    json: bool,
    command: &str,
) -> u8 {
    let req = RequestFrame { command: command.to_string(), max_output_tokens, timeout_s: timeout };
    match daemon::client_request(socket, &req) {
        Ok(resp) => {
            if json {
                println!("{}", serde_json::to_string(&resp).unwrap());
            } else {
                print!("{}", resp.stdout);
                eprint!("{}", resp.stderr);
            }
            resp.exit_code.clamp(0, u8::MAX as i32) as u8
        }
        Err(e) => fail(EXIT_TRANSPORT, e),
    }
}

fn cmd_fuzz_diff(
    draws: u64,
    lines: u64,
    shard_counts: &[u64],
    seed: u64,
    work_dir: Option<PathBuf>,
    json: bool,
) -> u8 {
    let work_dir = work_dir
        .unwrap_or_else(|| std::env::temp_dir().join(format!("shardpipe-fuzz-{seed}")));
    let env = ExecEnv::default();
    let report = match harness::fuzz_session(seed, draws, lines, shard_counts, &work_dir, &env) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INTERNAL, e),
    };
    if json {
        let record = serde_json::json!({
            "total": report.total,
            "failures": report.failures.len(),
            "histogram": report.histogram,
            "all_classes_covered": report.all_classes_covered(),
        });
        println!("{record}");
    } else {
        println!("drew {} pipelines over a {lines}-line corpus, S = {shard_counts:?}", report.total);
        for (class, count) in &report.histogram {
            println!("  {class:<12} {count}");
        }
    }
    for verdict in &report.failures {
        eprintln!("FAIL [{}] {}", verdict.strategy, verdict.command);
        for div in &verdict.divergences {
            eprintln!(
                "  S={}: parallel exit {}, sequential exit {}{}",
                div.shard_count,
                div.parallel_exit,
                div.sequential_exit,
                div.bundle_dir
                    .as_ref()
                    .map(|d| format!(", repro bundle at {}", d.display()))
                    .unwrap_or_default()
            );
        }
    }
    if report.ok() {
        if !json {
            println!("PASS: {} / {} byte-exact", report.total, report.total);
        }
        EXIT_OK
    } else if !report.all_classes_covered() {
        fail(EXIT_INTERNAL, "fuzz session did not cover all five strategy classes")
    } else {
        fail(EXIT_INTERNAL, format!("{} of {} pipelines diverged", report.failures.len(), report.total))
    }
}

fn percentile(sorted_ms: &[f64], p: f64) -> f64 {
    if sorted_ms.is_empty() {
        return 0.0;
    }
    let rank = (p * (sorted_ms.len() - 1) as f64).round() as usize;
    sorted_ms[rank.min(sorted_ms.len() - 1)]
}

fn cmd_bench(
    bytes: u64,
    shard_counts: &[u64],
    repeats: u64,
    queries: &[String],
    work_dir: Option<PathBuf>,
    json: bool,
) -> u8 {
    const FLOOR: u64 = 1 << 30;
    if bytes < FLOOR {
        eprintln!(
            "shardpipe: warning: corpus of {bytes} bytes is below the 1 GiB floor; results are noise"
        );
    }
    let work_dir = work_dir.unwrap_or_else(|| std::env::temp_dir().join("shardpipe-bench"));
    if let Err(e) = std::fs::create_dir_all(&work_dir) {
        return fail(EXIT_INTERNAL, e);
    }
    // The generator averages ~49 bytes per line (48 content + newline).
    let lines = (bytes / 49).max(1);
    let corpus = work_dir.join("corpus.jsonl");
    let fresh = std::fs::metadata(&corpus).map(|m| m.len() < bytes / 2).unwrap_or(true);
    if fresh {
        eprintln!("shardpipe: generating {lines}-line synthetic corpus at {}", corpus.display());
        if let Err(e) = harness::gen_corpus(1, lines, 48, &corpus) {
            return fail(EXIT_INTERNAL, e);
        }
    }
    let default_queries: Vec<String> = ["the quick brown fox", "lorem ipsum dolor"]
        .iter()
        .map(|phrase| format!("rg -F '{phrase}' corpus.jsonl | wc -l"))
        .collect();
    let queries = if queries.is_empty() { &default_queries } else { queries };

    let mut t1_median = None;
    println!("{:>6} {:>12} {:>12} {:>8}", "shards", "median_ms", "p95_ms", "speedup");
    for &s in shard_counts {
        let shard_dir = work_dir.join(format!("s{s}"));
        let ss = match shards::shard(&corpus, s, &shard_dir) {
            Ok(ss) => ss,
            Err(e) => return fail(EXIT_INTERNAL, e),
        };
        let engine = build_engine(
            &CorpusArgs { corpus: corpus.clone(), shard_dir: Some(shard_dir) },
            Some(ss),
            300,
        );
        let mut samples = Vec::new();
        for query in queries {
            for _ in 0..repeats {
                let t = Instant::now();
                if let Err(e) = engine.run(query) {
                    return fail(engine_error_exit(&e), e);
                }
                samples.push(t.elapsed().as_secs_f64() * 1000.0);
            }
        }
        samples.sort_by(|a, b| a.total_cmp(b));
        let median = percentile(&samples, 0.5);
        let p95 = percentile(&samples, 0.95);
        let t1 = *t1_median.get_or_insert(median);
        let speedup = if median > 0.0 { t1 / median } else { 1.0 };
        println!("{s:>6} {median:>12.2} {p95:>12.2} {speedup:>8.2}");
        if json {
            let record = serde_json::json!({
                "shards": s, "median_ms": median, "p95_ms": p95, "speedup": speedup,
                "samples": samples.len(),
            });
            eprintln!("{record}");
        }
    }
    EXIT_OK
}

fn cmd_score(input: &Path, json: bool) -> u8 {
    let text = if input == Path::new("-") {
        let mut buf = String::new();
        if let Err(e) = io::stdin().read_to_string(&mut buf) {
            return fail(EXIT_INTERNAL, e);
        }
        buf
    } else {
        match std::fs::read_to_string(input) {
            Ok(t) => t,
            Err(e) => return fail(EXIT_COMMAND, format!("{}: {e}", input.display())),
        }
    };

    let mut rows = 0u64;
    let (mut sum_em, mut sum_f1, mut sum_reward) = (0.0, 0.0, 0.0);
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return fail(EXIT_COMMAND, format!("line {}: {e}", lineno + 1)),
        };
        let refs: Vec<String> = match value.get("references").and_then(|r| r.as_array()) {
            Some(arr) => arr.iter().filter_map(|v| v.as_str().map(String::from)).collect(),
            None => return fail(EXIT_COMMAND, format!("line {}: missing references", lineno + 1)),
        };
        let score = if let Some(traj) = value.get("trajectory").and_then(|v| v.as_str()) {
            shardpipe::qa::score_trajectory(traj, &refs)
        } else if let Some(pred) = value.get("prediction").and_then(|v| v.as_str()) {
            shardpipe::qa::score_prediction(pred, &refs)
        } else {
            return fail(
                EXIT_COMMAND,
                format!("line {}: need prediction or trajectory", lineno + 1),
            );
        };
        let score = match score {
            Ok(s) => s,
            Err(e) => return fail(EXIT_COMMAND, format!("line {}: {e}", lineno + 1)),
        };
        rows += 1;
        sum_em += score.em;
        sum_f1 += score.f1;
        sum_reward += score.reward;
        println!(
            "{}",
            serde_json::json!({ "em": score.em, "f1": score.f1, "reward": score.reward })
        );
    }
    if rows == 0 {
        return fail(EXIT_COMMAND, "no records in input");
    }
    let n = rows as f64;
    let summary = serde_json::json!({
        "rows": rows,
        "mean_em": sum_em / n,
        "mean_f1": sum_f1 / n,
        "mean_reward": sum_reward / n,
    });
    if json {
        println!("{summary}");
    } else {
        println!(
            "rows {rows}  mean_em {:.4}  mean_f1 {:.4}  mean_reward {:.4}",
            sum_em / n,
            sum_f1 / n,
            sum_reward / n
        );
    }
    EXIT_OK
}
