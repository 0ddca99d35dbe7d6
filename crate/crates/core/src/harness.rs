//! Differential-testing harness: generate corpora and pipelines, run the
//! parallel engine against the sequential oracle, and assert byte-exact
//! equality. One side of every comparison is always the sequential run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::classify::classify;
use crate::engine::{Engine, EngineConfig};
use crate::exec::{aggregate_exit, ExecEnv};
use crate::pipeline::parse_pipeline;
use crate::shards;

/// Shard counts exercised by default; 3 catches remainder-line bugs.
pub const DEFAULT_SHARD_COUNTS: &[u64] = &[1, 2, 3, 4, 8];

const VOCAB: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "theta", "kappa", "lambda", "sigma",
    "hotel", "group", "office", "city", "river", "mountain", "acid", "phrase", "corpus", "record",
];

/// Multi-word phrases planted into the corpus for Head/SortHead cases.
const PLANTED: &[&str] = &["picric acid", "oberoi group", "distinctive phrase", "san diego"];

/// Write a deterministic pseudo-random corpus: one record per line,
/// printable ASCII, planted duplicates and phrases.
pub fn gen_corpus(seed: u64, lines: u64, avg_len: usize, path: &Path) -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let mut history: Vec<String> = Vec::new();
    let words_per_line = (avg_len / 6).max(2);
    for i in 0..lines {
        // Periodically duplicate an earlier line to stress uniq handling.
        let line = if !history.is_empty() && rng.gen_bool(0.15) {
            history[rng.gen_range(0..history.len())].clone()
        } else {
            let mut parts = vec![format!("doc{i}")];
            for _ in 0..words_per_line {
                parts.push(VOCAB[rng.gen_range(0..VOCAB.len())].to_string());
            }
            if rng.gen_bool(0.2) {
                parts.push(PLANTED[rng.gen_range(0..PLANTED.len())].to_string());
            }
            parts.join(" ")
        };
        if history.len() < 64 {
            history.push(line.clone());
        }
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out)
}

/// Weighted random-pipeline generator over the corpus vocabulary.
#[derive(Debug, Clone)]
pub struct PipelineGrammar {
    pub seed: u64,
}

impl PipelineGrammar {
    pub fn new(seed: u64) -> Self {
        PipelineGrammar { seed }
    }

    fn pattern(&self, rng: &mut ChaCha8Rng) -> String {
        match rng.gen_range(0..10) {
            0..=5 => VOCAB[rng.gen_range(0..VOCAB.len())].to_string(),
            6..=7 => PLANTED[rng.gen_range(0..PLANTED.len())].to_string(),
            // Absent pattern: exercises the no-match path.
            _ => format!("zzqx{}", rng.gen_range(0..100)),
        }
    }

    fn quoted_pattern(&self, rng: &mut ChaCha8Rng) -> String {
        let p = self.pattern(rng);
        if p.contains(' ') {
            format!("\"{p}\"")
        } else {
            p
        }
    }

    /// Random stateless prefix starting with an rg stage on the corpus.
    fn stateless_prefix(&self, rng: &mut ChaCha8Rng) -> String {
        let flag = ["-F", "-i -F", "-w -F"][rng.gen_range(0..3)];
        let mut cmd = format!("rg {flag} {} corpus.jsonl", self.quoted_pattern(rng));
        match rng.gen_range(0..6) {
            0 => cmd.push_str(&format!(" | rg -F {}", self.quoted_pattern(rng))),
            1 => cmd.push_str(&format!(" | cut -d \" \" -f 1-{}", rng.gen_range(2..5))),
            2 => cmd.push_str(" | tr a b"),
            3 => cmd.push_str(&format!(
                " | sed s/{}/{}/g",
                VOCAB[rng.gen_range(0..VOCAB.len())],
                VOCAB[rng.gen_range(0..VOCAB.len())]
            )),
            _ => {}
        }
        cmd
    }

    /// Deterministic command for this draw. Returns the command and the
    /// strategy class it classifies into (the self-reported histogram key).
    pub fn gen_pipeline(&self, draw: u64) -> (String, &'static str) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e3779b9).wrapping_add(draw));
        let cmd = match rng.gen_range(0..100) {
            0..=24 => {
                format!("{} | head -n {}", self.stateless_prefix(&mut rng), rng.gen_range(1..8))
            }
            25..=44 => format!("{} | wc -l", self.stateless_prefix(&mut rng)),
            45..=64 => {
                let uniq = if rng.gen_bool(0.5) { " | uniq" } else { "" };
                format!(
                    "{} | sort{uniq} | head -n {}",
                    self.stateless_prefix(&mut rng),
                    rng.gen_range(1..8)
                )
            }
            65..=84 => self.stateless_prefix(&mut rng),
            _ => match rng.gen_range(0..6) {
                0 => format!("rg -n {} corpus.jsonl", self.quoted_pattern(&mut rng)),
                1 => format!("{} | head -n 3 | wc -l", self.stateless_prefix(&mut rng)),
                2 => format!("{} | sort -r | head -n 2", self.stateless_prefix(&mut rng)),
                3 => format!("awk {{print}} corpus.jsonl"),
                4 => format!("cat corpus.jsonl | wc -l"),
                _ => format!("{} | sort | uniq -c | head -n 3", self.stateless_prefix(&mut rng)),
            },
        };
        let class = classify(&parse_pipeline(&cmd).expect("generated command parses")).kind();
        (cmd, class)
    }
}

/// One shard-count comparison that diverged.
#[derive(Debug)]
pub struct Divergence {
    pub shard_count: u64,
    pub parallel_stdout: Vec<u8>,
    pub sequential_stdout: Vec<u8>,
    pub parallel_exit: i32,
    pub sequential_exit: i32,
    /// Directory holding a minimized reproduction, when one was written.
    pub bundle_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Verdict {
    pub command: String,
    pub strategy: &'static str,
    pub divergences: Vec<Divergence>,
}

impl Verdict {
    pub fn pass(&self) -> bool {
        self.divergences.is_empty()
    }
}

fn build_engine(corpus: &Path, shardset: Option<shards::ShardSet>, env: &ExecEnv) -> Engine {
    Engine::new(
        EngineConfig {
            corpus_path: corpus.to_path_buf(),
            corpus_name: "corpus.jsonl".to_string(),
            env: env.clone(),
        },
        shardset,
    )
}

/// Compare parallel vs sequential execution of one command at one shard
/// count. Returns the divergence, if any.
fn compare_once(
    cmd: &str,
    corpus: &Path,
    shard_dir: &Path,
    s: u64,
    env: &ExecEnv,
) -> Result<Option<Divergence>, Box<dyn std::error::Error>> {
    let ss = shards::shard(corpus, s, shard_dir)?;
    let engine = build_engine(corpus, Some(ss), env);
    let parallel = engine.run(cmd)?;
    let sequential = engine.exec_sequential(cmd)?;
    let seq_exit = aggregate_exit(std::slice::from_ref(&sequential));
    if parallel.stdout == sequential.stdout && parallel.exit_code == seq_exit {
        return Ok(None);
    }
    Ok(Some(Divergence {
        shard_count: s,
        parallel_stdout: parallel.stdout,
        sequential_stdout: sequential.stdout,
        parallel_exit: parallel.exit_code,
        sequential_exit: seq_exit,
        bundle_dir: None,
    }))
}

/// Run `cmd` against the sequential oracle for every shard count; on
/// failure, write a minimized reproduction bundle under `work_dir`.
pub fn diff_run(
    cmd: &str,
    corpus: &Path,
    shard_counts: &[u64],
    work_dir: &Path,
    env: &ExecEnv,
) -> Result<Verdict, Box<dyn std::error::Error>> {
    let pipeline = parse_pipeline(cmd)?;
    let strategy = classify(&pipeline).kind();
    let mut divergences = Vec::new();
    for &s in shard_counts {
        let shard_dir = work_dir.join(format!("s{s}"));
        if let Some(mut div) = compare_once(cmd, corpus, &shard_dir, s, env)? {
            let bundle = work_dir.join(format!("fail-s{s}"));
            if let Ok(dir) = write_bundle(cmd, corpus, s, env, &div, &bundle) {
                div.bundle_dir = Some(dir);
            }
            divergences.push(div);
        }
    }
    Ok(Verdict { command: cmd.to_string(), strategy, divergences })
}

/// Greedy line-level minimization: drop chunks of the corpus while the
/// divergence persists, then persist the reproduction bundle.
fn write_bundle(
    cmd: &str,
    corpus: &Path,
    s: u64,
    env: &ExecEnv,
    div: &Divergence,
    bundle_dir: &Path,
) -> Result<PathBuf, Box<dyn std::error::Error>> {
    fs::create_dir_all(bundle_dir)?;
    let scratch = bundle_dir.join("scratch");
    fs::create_dir_all(&scratch)?;

    let full = fs::read(corpus)?;
    let mut lines: Vec<&[u8]> = full.split_inclusive(|&b| b == b'\n').collect();
    let still_fails = |candidate: &[&[u8]]| -> bool {
        let bytes: Vec<u8> = candidate.concat();
        let c = scratch.join("corpus.jsonl");
        if fs::write(&c, &bytes).is_err() {
            return false;
        }
        let sd = scratch.join("shards");
        let _ = fs::remove_dir_all(&sd);
        matches!(compare_once(cmd, &c, &sd, s, env), Ok(Some(_)))
    };

    let mut chunk = lines.len() / 2;
    while chunk >= 1 && lines.len() > 1 {
        let mut i = 0;
        let mut removed_any = false;
        while i < lines.len() && lines.len() > 1 {
            let take = chunk.min(lines.len() - i);
            let mut candidate = lines.clone();
            candidate.drain(i..i + take);
            if !candidate.is_empty() && still_fails(&candidate) {
                lines = candidate;
                removed_any = true;
            } else {
                i += take;
            }
        }
        if !removed_any {
            if chunk == 1 {
                break;
            }
            chunk /= 2;
        }
    }

    let minimized: Vec<u8> = lines.concat();
    fs::write(bundle_dir.join("corpus.jsonl"), &minimized)?;
    fs::write(bundle_dir.join("command.txt"), cmd)?;
    fs::write(bundle_dir.join("parallel.out"), &div.parallel_stdout)?;
    fs::write(bundle_dir.join("sequential.out"), &div.sequential_stdout)?;
    fs::write(bundle_dir.join("shard_count.txt"), s.to_string())?;
    let _ = fs::remove_dir_all(&scratch);
    Ok(bundle_dir.to_path_buf())
}

/// Replay a reproduction bundle; true when it still fails.
pub fn replay_bundle(bundle_dir: &Path, env: &ExecEnv) -> Result<bool, Box<dyn std::error::Error>> {
    let cmd = fs::read_to_string(bundle_dir.join("command.txt"))?;
    let s: u64 = fs::read_to_string(bundle_dir.join("shard_count.txt"))?.trim().parse()?;
    let corpus = bundle_dir.join("corpus.jsonl");
    let shard_dir = bundle_dir.join("replay-shards");
    let _ = fs::remove_dir_all(&shard_dir);
    Ok(compare_once(&cmd, &corpus, &shard_dir, s, env)?.is_some())
}

/// Outcome of a whole fuzz session.
#[derive(Debug)]
pub struct SessionReport {
    pub total: u64,
    pub failures: Vec<Verdict>,
    pub histogram: BTreeMap<&'static str, u64>,
}

impl SessionReport {
    /// All comparisons passed and all five strategy classes were drawn.
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.all_classes_covered()
    }

    pub fn all_classes_covered(&self) -> bool {
        ["concat", "head", "count", "sorthead", "sequential"]
            .iter()
            .all(|k| self.histogram.get(k).copied().unwrap_or(0) > 0)
    }
}

/// Run a full differential fuzz session over a generated corpus.
pub fn fuzz_session(
    seed: u64,
    draws: u64,
    corpus_lines: u64,
    shard_counts: &[u64],
    work_dir: &Path,
    env: &ExecEnv,
) -> Result<SessionReport, Box<dyn std::error::Error>> {
    fs::create_dir_all(work_dir)?;
    let corpus = work_dir.join("corpus.jsonl");
    gen_corpus(seed, corpus_lines, 48, &corpus)?;
    let grammar = PipelineGrammar::new(seed);
    let mut histogram = BTreeMap::new();
    let mut failures = Vec::new();
    for draw in 0..draws {
        let (cmd, class) = grammar.gen_pipeline(draw);
        *histogram.entry(class).or_insert(0) += 1;
        let verdict = diff_run(&cmd, &corpus, shard_counts, work_dir, env)?;
        if !verdict.pass() {
            failures.push(verdict);
        }
    }
    Ok(SessionReport { total: draws, failures, histogram })
}
