//! End-to-end request path: parse, classify, execute, reduce, truncate.
//!
//! Any internal fault on the parallel path (malformed shard count, unsorted
//! merge input, shard spawn failure, output-cap breach) transparently
//! retries the request sequentially and flags the telemetry record.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{classify, ReductionStrategy};
use crate::exec::{self, ExecEnv, ShardResult};
use crate::pipeline::{ParseError, Pipeline, PipelineParser};
use crate::reduce;
use crate::shards::ShardSet;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u64 = 2048;
pub const TRUNCATION_MARKER: &[u8] = b"\n[truncated]\n";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Exec(#[from] exec::ExecError),
}

/// Per-request timing and routing record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Telemetry {
    pub canonical_command: String,
    pub strategy: String,
    pub line_limit: Option<u64>,
    pub shard_count: usize,
    pub fallback: bool,
    pub parse_ms: f64,
    pub classify_ms: f64,
    pub exec_ms: f64,
    pub reduce_ms: f64,
    pub per_shard_ms: Vec<f64>,
}

/// Final outcome of one engine request, before agent-facing truncation.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub exit_code: i32,
    pub telemetry: Telemetry,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub corpus_path: PathBuf,
    /// Logical file name the agent addresses.
    pub corpus_name: String,
    pub env: ExecEnv,
}

/// The execution engine: a parser, a corpus, and optionally a shard set.
pub struct Engine {
    parser: PipelineParser,
    config: EngineConfig,
    shards: Option<ShardSet>,
}

impl Engine {
    pub fn new(config: EngineConfig, shards: Option<ShardSet>) -> Self {
        let parser = PipelineParser::new(config.corpus_name.clone());
        Engine { parser, config, shards }
    }

    pub fn shard_count(&self) -> usize {
        self.shards.as_ref().map(|s| s.count()).unwrap_or(0)
    }

    pub fn parser(&self) -> &PipelineParser {
        &self.parser
    }

    pub fn env(&self) -> &ExecEnv {
        &self.config.env
    }

    /// Run a raw command through the full engine path.
    pub fn run(&self, raw: &str) -> Result<Outcome, EngineError> {
        self.run_with_env(raw, &self.config.env)
    }

    /// Same as [`run`](Self::run) with a per-request environment override.
    pub fn run_with_env(&self, raw: &str, env: &ExecEnv) -> Result<Outcome, EngineError> {
        let t0 = Instant::now();
        let pipeline = self.parser.parse(raw)?;
        let parse_ms = t0.elapsed().as_secs_f64() * 1000.0;

        let t1 = Instant::now();
        let strategy = classify(&pipeline);
        let classify_ms = t1.elapsed().as_secs_f64() * 1000.0;

        let mut telemetry = Telemetry {
            canonical_command: self.parser.render(&pipeline),
            strategy: strategy.kind().to_string(),
            line_limit: strategy.line_limit(),
            shard_count: self.shard_count(),
            fallback: false,
            parse_ms,
            classify_ms,
            exec_ms: 0.0,
            reduce_ms: 0.0,
            per_shard_ms: Vec::new(),
        };

        let shards = match (&strategy, &self.shards) {
            (ReductionStrategy::Sequential, _) | (_, None) => {
                return self.run_sequential(&pipeline, env, telemetry);
            }
            (_, Some(ss)) => ss,
        };

        let t2 = Instant::now();
        let results = match exec::fan_out(&pipeline, &strategy, shards, env) {
            Ok(results) => results,
            Err(_) => {
                telemetry.fallback = true;
                return self.run_sequential(&pipeline, env, telemetry);
            }
        };
        telemetry.exec_ms = t2.elapsed().as_secs_f64() * 1000.0;
        telemetry.per_shard_ms = results.iter().map(|r| r.duration_ms).collect();

        if results.iter().any(|r| r.capped) {
            telemetry.fallback = true;
            return self.run_sequential(&pipeline, env, telemetry);
        }

        let t3 = Instant::now();
        let merged = match &strategy {
            ReductionStrategy::Concat => Ok(reduce::reduce_concat(&results)),
            ReductionStrategy::Head { n } => Ok(reduce::reduce_head(&results, *n)),
            ReductionStrategy::Count => reduce::reduce_count(&results),
            ReductionStrategy::SortHead { n, with_uniq } => {
                reduce::reduce_sorthead(&results, *n, *with_uniq)
            }
            ReductionStrategy::Sequential => unreachable!("handled above"),
        };
        let merged = match merged {
            Ok(m) => m,
            Err(_) => {
                telemetry.fallback = true;
                return self.run_sequential(&pipeline, env, telemetry);
            }
        };
        telemetry.reduce_ms = t3.elapsed().as_secs_f64() * 1000.0;

        Ok(Outcome {
            stdout: merged.stdout,
            stderr: exec::dedup_stderr(&results),
            exit_code: exec::aggregate_exit(&results),
            telemetry,
        })
    }

    /// Run the unmodified pipeline on the full corpus (the oracle path).
    pub fn exec_sequential(&self, raw: &str) -> Result<ShardResult, EngineError> {
        let pipeline = self.parser.parse(raw)?;
        Ok(exec::exec_sequential(&pipeline, &self.config.corpus_path, &self.config.env)?)
    }

    fn run_sequential(
        &self,
        pipeline: &Pipeline,
        env: &ExecEnv,
        mut telemetry: Telemetry,
    ) -> Result<Outcome, EngineError> {
        let t = Instant::now();
        let r = exec::exec_sequential(pipeline, &self.config.corpus_path, env)?;
        telemetry.exec_ms = t.elapsed().as_secs_f64() * 1000.0;
        Ok(Outcome {
            exit_code: exec::aggregate_exit(std::slice::from_ref(&r)),
            stdout: r.stdout,
            stderr: r.stderr,
            telemetry,
        })
    }
}

/// Keep the first `max_tokens` whitespace-delimited tokens, preserving the
/// original bytes up to the end of the last kept token. Appends a marker
/// when anything was cut.
pub fn truncate_output(stdout: &[u8], max_tokens: u64) -> (Vec<u8>, bool) {
    debug_assert!(max_tokens >= 1);
    let mut tokens = 0u64;
    let mut in_token = false;
    let mut keep_end = 0usize;
    for (i, &b) in stdout.iter().enumerate() {
        let ws = b.is_ascii_whitespace();
        if !ws && !in_token {
            if tokens == max_tokens {
                // More content exists beyond the budget.
                let mut out = stdout[..keep_end].to_vec();
                out.extend_from_slice(TRUNCATION_MARKER);
                return (out, true);
            }
            in_token = true;
            tokens += 1;
        } else if ws && in_token {
            in_token = false;
        }
        if !ws {
            keep_end = i + 1;
        }
    }
    (stdout.to_vec(), false)
}
