//! Acceptance gate: one test per release criterion. Each test prints a
//! single `ACCEPTANCE <n> <name>: PASS|FAIL|SKIP` line (visible with
//! `cargo test --test acceptance -- --nocapture`) and fails the build on
//! any violation.

use std::fs;
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use shardpipe::classify::{classify, ReductionStrategy};
use shardpipe::daemon::{self, read_frame, write_frame, RequestFrame, ResponseFrame};
use shardpipe::engine::{truncate_output, DEFAULT_MAX_OUTPUT_TOKENS};
use shardpipe::harness::{diff_run, fuzz_session, gen_corpus};
use shardpipe::pipeline::{parse_pipeline, ParseError};
use shardpipe::qa;
use shardpipe::shards;
use shardpipe::{Engine, EngineConfig, ExecEnv};

fn report(criterion: u32, name: &str, failures: &[String]) {
    let verdict = if failures.is_empty() { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion} {name}: {verdict}");
    for f in failures {
        println!("  - {f}");
    }
    assert!(failures.is_empty(), "criterion {criterion} ({name}) failed: {failures:?}");
}

fn engine_for(corpus: &Path, shardset: Option<shards::ShardSet>) -> Engine {
    Engine::new(
        EngineConfig {
            corpus_path: corpus.to_path_buf(),
            corpus_name: "corpus.jsonl".to_string(),
            env: ExecEnv::default(),
        },
        shardset,
    )
}

/// Criterion 1: differential fuzzing — 500 generated pipelines over a
/// 100k-line corpus, S in {1,2,3,4,8}, byte-exact against the sequential
/// oracle, with at least 20 draws of every strategy class.
#[test]
fn acceptance_1_byte_exact_equivalence() {
    let mut failures = Vec::new();
    let dir = TempDir::new().unwrap();
    let started = Instant::now();
    let report_res =
        fuzz_session(42, 500, 100_000, &[1, 2, 3, 4, 8], dir.path(), &ExecEnv::default());
    let elapsed = started.elapsed();
    match report_res {
        Ok(session) => {
            for verdict in &session.failures {
                failures.push(format!(
                    "divergence [{}] {} at S={:?}",
                    verdict.strategy,
                    verdict.command,
                    verdict.divergences.iter().map(|d| d.shard_count).collect::<Vec<_>>()
                ));
            }
            for class in ["concat", "head", "count", "sorthead", "sequential"] {
                let n = session.histogram.get(class).copied().unwrap_or(0);
                if n < 20 {
                    failures.push(format!("class {class} drawn only {n} times (< 20)"));
                }
            }
            println!(
                "  fuzz histogram: {:?}; runtime {:.1}s",
                session.histogram,
                elapsed.as_secs_f64()
            );
        }
        Err(e) => failures.push(format!("fuzz session error: {e}")),
    }
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if cores >= 4 && elapsed > Duration::from_secs(600) {
        failures.push(format!(
            "runtime {:.0}s exceeds the 10-minute budget on a {cores}-core machine",
            elapsed.as_secs_f64()
        ));
    }
    report(1, "byte-exact-equivalence", &failures);
}

/// Criterion 2: fixed classification table (>= 30 commands) and the
/// forbidden-construct rejections, exact match with zero tolerance.
#[test]
fn acceptance_2_classification_table() {
    use ReductionStrategy::*;
    let table: &[(&str, ReductionStrategy)] = &[
        // Concat: fully stateless pipelines.
        (r#"rg -F "Picric acid" corpus.jsonl"#, Concat),
        ("grep -F needle corpus.jsonl", Concat),
        ("rg -i pattern corpus.jsonl", Concat),
        ("rg -w word corpus.jsonl", Concat),
        ("rg -e pattern corpus.jsonl", Concat),
        ("rg -F a corpus.jsonl | grep -v b", Concat),
        ("rg -F a corpus.jsonl | rg -i -F b", Concat),
        ("rg -F a corpus.jsonl | sed 's/a/b/g'", Concat),
        ("rg -F a corpus.jsonl | cut -d , -f 1", Concat),
        ("rg -F a corpus.jsonl | tr a b", Concat),
        ("rg -F a corpus.jsonl | tr -d q", Concat),
        // Head: stateless prefix, terminal head -n N.
        (r#"rg -F "distinctive phrase" corpus.jsonl | head -n 3"#, Head { n: 3 }),
        (r#"rg -F "phrase1" corpus.jsonl | rg -i -F "phrase2" | head -n 3"#, Head { n: 3 }),
        ("rg -F x corpus.jsonl | grep -v y | head -n 10", Head { n: 10 }),
        ("rg -F x corpus.jsonl | sed 's/x/y/' | head -n 1", Head { n: 1 }),
        ("grep foo corpus.jsonl | head -n 20", Head { n: 20 }),
        // Count: stateless prefix, terminal wc -l.
        (r#"rg -F "pattern" corpus.jsonl | wc -l"#, Count),
        ("grep -v x corpus.jsonl | wc -l", Count),
        ("rg -F x corpus.jsonl | cut -f 2 | wc -l", Count),
        // SortHead: stateless prefix, sort [uniq] head.
        ("rg -F x corpus.jsonl | sort | head -n 5", SortHead { n: 5, with_uniq: false }),
        ("rg -F x corpus.jsonl | sort | uniq | head -n 4", SortHead { n: 4, with_uniq: true }),
        (
            "rg -F x corpus.jsonl | cut -f 2 | sort | uniq | head -n 10",
            SortHead { n: 10, with_uniq: true },
        ),
        // Sequential: first stage is not a search operator.
        ("cat corpus.jsonl | wc -l", Sequential),
        ("sed 's/a/b/' corpus.jsonl", Sequential),
        ("wc -l corpus.jsonl", Sequential),
        ("ls", Sequential),
        // Sequential: stateful flags (line indexing, count modes,
        // contextual windows, in-place edits).
        ("rg -n x corpus.jsonl", Sequential),
        ("rg -c x corpus.jsonl", Sequential),
        ("grep --count x corpus.jsonl", Sequential),
        ("rg -A 2 x corpus.jsonl", Sequential),
        ("rg -B 1 x corpus.jsonl | head -n 3", Sequential),
        ("rg -C 3 x corpus.jsonl", Sequential),
        ("rg x corpus.jsonl | sed -i 's/a/b/'", Sequential),
        ("rg x corpus.jsonl | sed -n '1,5p'", Sequential),
        // Sequential: global or cross-line stages.
        ("rg x corpus.jsonl | awk '{print $1}'", Sequential),
        ("rg x corpus.jsonl | tail -n 5", Sequential),
        ("rg x corpus.jsonl | sort", Sequential),
        ("rg x corpus.jsonl | sort | uniq", Sequential),
        ("rg x corpus.jsonl | sort -r | head -n 2", Sequential),
        ("rg x corpus.jsonl | sort -u | head -n 2", Sequential),
        ("rg x corpus.jsonl | sort | uniq -c | head -n 3", Sequential),
        ("rg x corpus.jsonl | head -n 3 | wc -l", Sequential),
        ("rg x corpus.jsonl | head -c 100", Sequential),
        ("rg x corpus.jsonl | wc -c", Sequential),
        // Sequential: nothing to rebind per shard.
        ("rg -F x | wc -l", Sequential),
    ];
    assert!(table.len() >= 30, "table must hold at least 30 commands");

    let mut failures = Vec::new();
    for (cmd, expected) in table {
        match parse_pipeline(cmd) {
            Ok(p) => {
                let got = classify(&p);
                if got != *expected {
                    failures.push(format!("{cmd}: expected {expected:?}, got {got:?}"));
                }
            }
            Err(e) => failures.push(format!("{cmd}: failed to parse: {e}")),
        }
    }

    // Forbidden constructs must be rejected at parse time.
    let rejects: &[(&str, &str)] = &[
        ("rg x corpus.jsonl > out", ">"),
        ("rg x corpus.jsonl < in", "<"),
        ("rg x corpus.jsonl ; ls", ";"),
        ("rg x corpus.jsonl && ls", "&&"),
        ("rg x corpus.jsonl || ls", "||"),
        ("rg $(cat secret) corpus.jsonl", "$("),
        ("rg `cat secret` corpus.jsonl", "`"),
    ];
    for (cmd, construct) in rejects {
        match parse_pipeline(cmd) {
            Err(ParseError::ForbiddenConstruct(c)) if c.contains(construct) => {}
            other => failures.push(format!("{cmd}: expected ForbiddenConstruct, got {other:?}")),
        }
    }
    if !matches!(parse_pipeline("python corpus.jsonl"), Err(ParseError::UnknownTool(_))) {
        failures.push("python: expected UnknownTool rejection".to_string());
    }
    if !matches!(
        parse_pipeline("rg x /etc/passwd"),
        Err(ParseError::UnknownPath(_))
    ) {
        failures.push("rg x /etc/passwd: expected UnknownPath rejection".to_string());
    }
    report(2, "classification-table", &failures);
}

/// Criterion 3: the duplicate-flood SortHead corpus diverges when the
/// shard-local uniq is disabled (the harness bug switch) and passes with
/// the shipped engine.
#[test]
fn acceptance_3_sorthead_counterexample() {
    let mut failures = Vec::new();
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    fs::write(&corpus, b"a\na\na\nb\nc\nc\nc\nc\n").unwrap();
    let cmd = "rg -F '' corpus.jsonl | sort | uniq | head -n 2";

    let buggy = ExecEnv { sorthead_local_uniq: false, ..ExecEnv::default() };
    match diff_run(cmd, &corpus, &[2], &dir.path().join("buggy"), &buggy) {
        Ok(v) if v.pass() => {
            failures.push("bug switch did not reproduce the divergence".to_string())
        }
        Ok(v) => {
            for d in &v.divergences {
                match &d.bundle_dir {
                    Some(bundle) => {
                        // Minimized bundles must re-fail on replay.
                        match shardpipe::harness::replay_bundle(bundle, &buggy) {
                            Ok(true) => {}
                            Ok(false) => failures
                                .push(format!("bundle {} no longer fails", bundle.display())),
                            Err(e) => failures.push(format!("bundle replay error: {e}")),
                        }
                    }
                    None => failures.push("divergence produced no repro bundle".to_string()),
                }
            }
        }
        Err(e) => failures.push(format!("buggy diff_run error: {e}")),
    }

    match diff_run(cmd, &corpus, &[1, 2, 3, 4, 8], &dir.path().join("fixed"), &ExecEnv::default())
    {
        Ok(v) if !v.pass() => failures.push("shipped engine diverges on the counterexample".into()),
        Ok(_) => {}
        Err(e) => failures.push(format!("shipped diff_run error: {e}")),
    }
    report(3, "sorthead-counterexample", &failures);
}

/// Criterion 4: Count is invariant across shard counts and equals an
/// independent in-process line-count oracle, for 50 random filters.
#[test]
fn acceptance_4_count_linearity() {
    let mut failures = Vec::new();
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    gen_corpus(11, 20_000, 48, &corpus).unwrap();
    let content = fs::read(&corpus).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shard_counts = [1u64, 2, 3, 4, 8];
    let mut engines = Vec::new();
    for &s in &shard_counts {
        let ss = shards::shard(&corpus, s, &dir.path().join(format!("s{s}"))).unwrap();
        engines.push((s, engine_for(&corpus, Some(ss))));
    }

    for i in 0..50 {
        let pat: String =
            (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        let oracle = content
            .split_inclusive(|&b| b == b'\n')
            .filter(|line| {
                line.windows(pat.len()).any(|w| w == pat.as_bytes())
            })
            .count() as u64;
        let cmd = format!("rg -F {pat} corpus.jsonl | wc -l");
        for (s, engine) in &engines {
            match engine.run(&cmd) {
                Ok(outcome) => {
                    let text = String::from_utf8_lossy(&outcome.stdout);
                    let got: u64 = text.trim().parse().unwrap_or(u64::MAX);
                    if got != oracle {
                        failures.push(format!(
                            "filter {i} ({pat:?}) at S={s}: engine {got}, oracle {oracle}"
                        ));
                    }
                }
                Err(e) => failures.push(format!("filter {i} at S={s}: {e}")),
            }
        }
    }
    report(4, "count-linearity", &failures);
}

/// Criterion 5: shard-scaling speedup on a >= 1 GiB RAM-backed corpus,
/// t(8) <= 0.6 x t(1), with monotone non-increasing medians (10% noise
/// tolerance). Requires >= 8 hardware threads; skipped honestly otherwise.
#[test]
fn acceptance_5_shard_scaling() {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if threads < 8 {
        println!(
            "ACCEPTANCE 5 shard-scaling: SKIP ({threads} hardware thread(s) available, \
             criterion requires >= 8; parallel speedup is not measurable here)"
        );
        return;
    }

    let mut failures = Vec::new();
    let base = Path::new("/dev/shm");
    let work = base.join("shardpipe-acceptance-scaling");
    fs::create_dir_all(&work).unwrap();
    let corpus = work.join("corpus.jsonl");
    let target_bytes: u64 = 1 << 30;
    let lines = target_bytes / 49;
    if fs::metadata(&corpus).map(|m| m.len() < target_bytes / 2).unwrap_or(true) {
        gen_corpus(3, lines, 48, &corpus).unwrap();
    }

    let mut medians = Vec::new();
    for s in [1u64, 2, 4, 8] {
        let ss = shards::shard(&corpus, s, &work.join(format!("s{s}"))).unwrap();
        shards::warm(&ss).unwrap();
        let engine = engine_for(
            &corpus,
            Some(ss),
        );
        let mut samples = Vec::new();
        for _ in 0..5 {
            let t = Instant::now();
            engine.run("rg -F 'the quick brown fox' corpus.jsonl | wc -l").unwrap();
            samples.push(t.elapsed().as_secs_f64());
        }
        samples.sort_by(|a, b| a.total_cmp(b));
        medians.push((s, samples[samples.len() / 2]));
    }
    let t1 = medians[0].1;
    let t8 = medians.last().unwrap().1;
    println!("  medians: {medians:?}");
    if t8 > 0.6 * t1 {
        failures.push(format!("t(8)={t8:.3}s > 0.6 x t(1)={t1:.3}s"));
    }
    for pair in medians.windows(2) {
        if pair[1].1 > pair[0].1 * 1.10 {
            failures.push(format!(
                "median not monotone within 10%: t({})={:.3}s vs t({})={:.3}s",
                pair[0].0, pair[0].1, pair[1].0, pair[1].1
            ));
        }
    }
    let _ = fs::remove_dir_all(&work);
    report(5, "shard-scaling", &failures);
}

/// Criterion 6: 1000 framed requests over one connection are byte-identical
/// to in-process execution and finish within 2 minutes; decode(encode(x))
/// is the identity for 10k random frames.
#[test]
fn acceptance_6_daemon_equivalence() {
    let mut failures = Vec::new();
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    gen_corpus(5, 10_000, 48, &corpus).unwrap();
    let ss = shards::shard(&corpus, 4, &dir.path().join("shards")).unwrap();
    let engine = Arc::new(engine_for(&corpus, Some(ss.clone())));
    let local = engine_for(&corpus, Some(ss.clone()));
    let socket = dir.path().join("daemon.sock");
    let handle = daemon::serve(&socket, engine, Some(&ss), None).unwrap();

    // Mixed-strategy request templates, cycled over one connection.
    let commands = [
        "rg -F the corpus.jsonl | head -n 3",
        "rg -F lorem corpus.jsonl | wc -l",
        "rg -F a corpus.jsonl | sort | uniq | head -n 5",
        "rg -F quick corpus.jsonl",
        "cat corpus.jsonl | wc -l",
        "rg -F fox corpus.jsonl | tr a b | head -n 2",
        "rg -F zzz-not-present corpus.jsonl | head -n 3",
        "rg x corpus.jsonl > out",
    ];
    let started = Instant::now();
    let mut stream = UnixStream::connect(&socket).unwrap();
    for i in 0..1000usize {
        let cmd = commands[i % commands.len()];
        let req = RequestFrame {
            command: cmd.to_string(),
            max_output_tokens: None,
            timeout_s: None,
        };
        write_frame(&mut stream, &req).unwrap();
        let resp: ResponseFrame = read_frame(&mut stream).unwrap().expect("response");

        let expected = match local.run(cmd) {
            Ok(outcome) => {
                let (stdout, _) =
                    truncate_output(&outcome.stdout, DEFAULT_MAX_OUTPUT_TOKENS);
                (String::from_utf8_lossy(&stdout).into_owned(), outcome.exit_code)
            }
            Err(_) => (String::new(), 2),
        };
        if resp.stdout != expected.0 || resp.exit_code != expected.1 {
            failures.push(format!(
                "request {i} ({cmd}): daemon (exit {}) differs from in-process (exit {})",
                resp.exit_code, expected.1
            ));
            if failures.len() > 5 {
                break;
            }
        }
    }
    let elapsed = started.elapsed();
    drop(stream);
    handle.shutdown();
    println!("  1000 requests in {:.1}s", elapsed.as_secs_f64());
    if elapsed > Duration::from_secs(120) {
        failures.push(format!("1000 requests took {:.1}s (> 120s)", elapsed.as_secs_f64()));
    }

    // Wire-format identity on random frames.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..10_000 {
        let len = rng.gen_range(0..80);
        let command: String = (0..len)
            .map(|_| {
                let c = rng.gen_range(0x20u32..0x2FF);
                char::from_u32(c).unwrap_or('x')
            })
            .collect();
        let frame = RequestFrame {
            command,
            max_output_tokens: if rng.gen_bool(0.5) { Some(rng.gen()) } else { None },
            timeout_s: if rng.gen_bool(0.5) { Some(rng.gen()) } else { None },
        };
        let bytes = daemon::encode_frame(&frame).unwrap();
        let back: RequestFrame = daemon::decode_frame(&bytes).unwrap();
        if back != frame {
            failures.push(format!("frame {i} did not round-trip"));
            break;
        }
    }
    report(6, "daemon-equivalence", &failures);
}

/// Criterion 7: scoring oracle value, metric properties over 10k random
/// pairs, and exact-match article stripping.
#[test]
fn acceptance_7_metrics() {
    let mut failures = Vec::new();

    let (_, _, f1) = qa::token_f1("Rockstar Games", "Rockstar San Diego");
    if f1 != 0.4 {
        failures.push(format!("token_f1 oracle: expected exactly 0.4, got {f1}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let vocab = ["alpha", "beta", "the", "an", "multi-hop", "42", "Üppsala", "x,y."];
    let random_text = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(0..6);
        (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
    };
    for i in 0..10_000 {
        let a = random_text(&mut rng);
        let b = random_text(&mut rng);
        let (p, r, f1) = qa::token_f1(&a, &b);
        let (_, _, f1_rev) = qa::token_f1(&b, &a);
        if !(0.0..=1.0).contains(&f1) || !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&r) {
            failures.push(format!("pair {i}: metric out of [0,1]: p={p} r={r} f1={f1}"));
            break;
        }
        if (f1 - f1_rev).abs() > 1e-12 {
            failures.push(format!("pair {i}: f1 not symmetric: {f1} vs {f1_rev}"));
            break;
        }
        // best_f1 monotonicity: adding a reference never lowers the score.
        let refs = vec![b.clone()];
        let mut more = refs.clone();
        more.push(random_text(&mut rng));
        let base = qa::best_f1(&a, &refs).unwrap();
        let extended = qa::best_f1(&a, &more).unwrap();
        if extended + 1e-12 < base {
            failures.push(format!("pair {i}: best_f1 decreased when adding a reference"));
            break;
        }
        // Gate nullification: stray text outside tags zeroes the reward.
        let bad = format!("stray {a} <answer>{b}</answer>");
        if qa::format_gate(&bad) != 0 || qa::reward(&bad, &refs).unwrap() != 0.0 {
            failures.push(format!("pair {i}: format gate failed to nullify the reward"));
            break;
        }
    }

    for (pred, gold, want) in [
        ("The Golden Gate Bridge", "Golden Gate Bridge", 1u8),
        ("an apple", "Apple", 1),
        ("a Multi-Hop question", "multihop question", 1),
        ("the answer", "a different answer", 0),
    ] {
        let got = qa::exact_match(pred, &[gold.to_string()]).unwrap();
        if got != want {
            failures.push(format!("exact_match({pred:?}, {gold:?}): expected {want}, got {got}"));
        }
    }
    report(7, "metrics", &failures);
}

/// Criterion 8: shards reconstruct the corpus byte-for-byte for 100 random
/// corpora (including empty and no-trailing-newline cases) at S in
/// {1,2,3,5,8}.
#[test]
fn acceptance_8_sharder_reconstruction() {
    let mut failures = Vec::new();
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);

    for i in 0..100 {
        let corpus_bytes: Vec<u8> = if i == 0 {
            Vec::new()
        } else {
            let lines = rng.gen_range(1..200);
            let mut out = Vec::new();
            for l in 0..lines {
                let len = rng.gen_range(0..120);
                for _ in 0..len {
                    out.push(rng.gen_range(0x20u8..0x7F));
                }
                // Half the corpora end without a trailing newline.
                if l + 1 < lines || i % 2 == 0 {
                    out.push(b'\n');
                }
            }
            out
        };
        let corpus = dir.path().join(format!("c{i}.jsonl"));
        fs::write(&corpus, &corpus_bytes).unwrap();
        for s in [1u64, 2, 3, 5, 8] {
            let shard_dir = dir.path().join(format!("c{i}-s{s}"));
            match shards::shard(&corpus, s, &shard_dir) {
                Ok(ss) => {
                    let mut rebuilt = Vec::new();
                    for p in ss.shard_paths() {
                        rebuilt.extend_from_slice(&fs::read(&p).unwrap());
                    }
                    if rebuilt != corpus_bytes {
                        failures.push(format!("corpus {i} at S={s}: reconstruction differs"));
                    }
                    if !shards::verify(&ss).unwrap_or(false) {
                        failures.push(format!("corpus {i} at S={s}: digest verification failed"));
                    }
                }
                Err(e) => failures.push(format!("corpus {i} at S={s}: {e}")),
            }
        }
    }
    report(8, "sharder-reconstruction", &failures);
}
