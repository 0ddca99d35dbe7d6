//! Conservative classification of pipelines into reduction strategies.
//!
//! A pipeline earns a parallel strategy only when every stage is provably
//! shard-safe; anything else runs sequentially. The rules are evaluated in a
//! fixed order and the function is total.

use serde::{Deserialize, Serialize};

use crate::pipeline::{Pipeline, Stage};

/// How per-shard outputs recombine into the sequential-equivalent result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReductionStrategy {
    /// Concatenate shard outputs in shard order.
    Concat,
    /// Concatenate in shard order, then keep the first `n` lines.
    Head { n: u64 },
    /// Sum per-shard scalar line counts.
    Count,
    /// K-way merge locally sorted shard outputs, optional global uniq,
    /// global head.
    SortHead { n: u64, with_uniq: bool },
    /// Run unchanged on the full corpus.
    Sequential,
}

impl ReductionStrategy {
    pub fn kind(&self) -> &'static str {
        match self {
            ReductionStrategy::Concat => "concat",
            ReductionStrategy::Head { .. } => "head",
            ReductionStrategy::Count => "count",
            ReductionStrategy::SortHead { .. } => "sorthead",
            ReductionStrategy::Sequential => "sequential",
        }
    }

    pub fn line_limit(&self) -> Option<u64> {
        match self {
            ReductionStrategy::Head { n } | ReductionStrategy::SortHead { n, .. } => Some(*n),
            _ => None,
        }
    }
}

/// Verdict of the per-stage safety check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetyVerdict {
    pub safe: bool,
    pub reason: String,
}

impl SafetyVerdict {
    fn safe() -> Self {
        SafetyVerdict { safe: true, reason: String::new() }
    }
    fn unsafe_because(reason: &str) -> Self {
        SafetyVerdict { safe: false, reason: reason.to_string() }
    }
}

/// Structural role a stage plays for classification purposes.
#[derive(Debug, Clone, PartialEq, Eq)]
enum StageKind {
    /// Per-line map/filter: output over a concatenation equals the
    /// concatenation of outputs over the parts.
    Stateless,
    /// `sort` with no flags (bytewise ascending under LC_ALL=C).
    Sort,
    /// `uniq` with no flags.
    Uniq,
    /// `head -n N`.
    HeadN(u64),
    /// `wc -l`.
    WcL,
    Unsafe(String),
}

/// Boolean short flags rg/grep may carry in a stateless stage.
const GREP_BOOL_SHORTS: &[char] = &['F', 'i', 'w', 'v', 'o'];
const GREP_LONG_FLAGS: &[&str] = &["--mmap", "--no-config"];

fn grep_kind(st: &Stage, corpus_arg: Option<usize>) -> StageKind {
    let mut positionals = 0usize;
    let mut skip_next = false;
    for (ai, arg) in st.args.iter().enumerate() {
        if skip_next {
            skip_next = false;
            continue;
        }
        if Some(ai) == corpus_arg {
            continue;
        }
        if arg == "-e" {
            skip_next = true;
            continue;
        }
        if let Some(rest) = arg.strip_prefix("--") {
            if GREP_LONG_FLAGS.contains(&arg.as_str()) {
                continue;
            }
            return StageKind::Unsafe(match rest {
                "count" => "count-based mode".into(),
                "context" => "contextual windowing".into(),
                _ => format!("unsupported flag {arg}"),
            });
        }
        if let Some(rest) = arg.strip_prefix('-') {
            if rest.is_empty() {
                return StageKind::Unsafe("stdin operand".into());
            }
            if rest.chars().all(|c| GREP_BOOL_SHORTS.contains(&c)) {
                continue;
            }
            return StageKind::Unsafe(match rest {
                "n" => "line-indexing flag".into(),
                "c" => "count-based mode".into(),
                "A" | "B" | "C" => "contextual windowing".into(),
                "l" | "L" | "H" => "file-identity flag".into(),
                "m" => "match-limit flag".into(),
                _ => format!("unsupported flag -{rest}"),
            });
        }
        positionals += 1;
        if positionals > 1 || (has_e_flag(st) && positionals > 0) {
            return StageKind::Unsafe("extra positional operand".into());
        }
    }
    StageKind::Stateless
}

fn has_e_flag(st: &Stage) -> bool {
    st.args.iter().any(|a| a == "-e")
}

/// Accept only addressless `s<delim>pat<delim>repl<delim>[g]` scripts.
fn sed_script_is_simple_subst(script: &str) -> bool {
    let mut chars = script.chars();
    if chars.next() != Some('s') {
        return false;
    }
    let delim = match chars.next() {
        Some(d) if !d.is_alphanumeric() && d != '\\' && d != '\n' => d,
        _ => return false,
    };
    let rest: Vec<char> = chars.collect();
    let mut seen = 0usize;
    let mut i = 0usize;
    let mut tail_start = rest.len();
    while i < rest.len() {
        if rest[i] == '\\' {
            i += 2;
            continue;
        }
        if rest[i] == delim {
            seen += 1;
            if seen == 2 {
                tail_start = i + 1;
                break;
            }
        }
        i += 1;
    }
    if seen != 2 {
        return false;
    }
    let tail: String = rest[tail_start..].iter().collect();
    tail.is_empty() || tail == "g"
}

fn sed_kind(st: &Stage, corpus_arg: Option<usize>) -> StageKind {
    let mut script: Option<&str> = None;
    let mut skip_is_script = false;
    for (ai, arg) in st.args.iter().enumerate() {
        if Some(ai) == corpus_arg {
            continue;
        }
        if skip_is_script {
            skip_is_script = false;
            if script.is_some() {
                return StageKind::Unsafe("multiple sed expressions".into());
            }
            script = Some(arg);
            continue;
        }
        if arg == "-i" || arg.starts_with("-i") && arg.len() > 2 || arg == "--in-place" {
            return StageKind::Unsafe("in-place transformation".into());
        }
        if arg == "-e" || arg == "--expression" {
            skip_is_script = true;
            continue;
        }
        if arg.starts_with('-') && arg.len() > 1 {
            return StageKind::Unsafe(format!("unsupported sed flag {arg}"));
        }
        if script.is_some() {
            return StageKind::Unsafe("extra sed operand".into());
        }
        script = Some(arg);
    }
    match script {
        Some(s) if sed_script_is_simple_subst(s) => StageKind::Stateless,
        Some(_) => StageKind::Unsafe("sed script is not a simple substitution".into()),
        None => StageKind::Unsafe("missing sed script".into()),
    }
}

fn cut_kind(st: &Stage) -> StageKind {
    let mut has_selector = false;
    let mut skip_next = false;
    for arg in &st.args {
        if skip_next {
            skip_next = false;
            continue;
        }
        match arg.as_str() {
            "-d" => skip_next = true,
            "-f" | "-c" => {
                has_selector = true;
                skip_next = true;
            }
            a if a.starts_with("-d") && a.len() > 2 => {}
            a if (a.starts_with("-f") || a.starts_with("-c")) && a.len() > 2 => {
                has_selector = true;
            }
            _ => return StageKind::Unsafe(format!("unsupported cut argument {arg}")),
        }
    }
    if has_selector {
        StageKind::Stateless
    } else {
        StageKind::Unsafe("cut without a field/character selector".into())
    }
}

fn tr_kind(st: &Stage) -> StageKind {
    let a = &st.args;
    let is_set = |s: &String| !s.starts_with('-') || s == "-";
    match a.as_slice() {
        [s1, s2] if is_set(s1) && is_set(s2) => StageKind::Stateless,
        [d, s1] if d == "-d" && is_set(s1) => StageKind::Stateless,
        _ => StageKind::Unsafe("unsupported tr usage".into()),
    }
}

fn head_kind(st: &Stage, corpus_arg: Option<usize>) -> StageKind {
    let args: Vec<&String> =
        st.args.iter().enumerate().filter(|(ai, _)| Some(*ai) != corpus_arg).map(|(_, a)| a).collect();
    if args.len() == 2 && args[0] == "-n" {
        if let Ok(n) = args[1].parse::<u64>() {
            if n >= 1 && !args[1].starts_with('+') {
                return StageKind::HeadN(n);
            }
        }
    }
    StageKind::Unsafe("head supported only as `head -n N`".into())
}

fn wc_kind(st: &Stage, corpus_arg: Option<usize>) -> StageKind {
    let args: Vec<&String> =
        st.args.iter().enumerate().filter(|(ai, _)| Some(*ai) != corpus_arg).map(|(_, a)| a).collect();
    if args.len() == 1 && args[0] == "-l" {
        StageKind::WcL
    } else {
        StageKind::Unsafe("wc supported only as `wc -l`".into())
    }
}

fn bare_kind(st: &Stage, corpus_arg: Option<usize>, bare: StageKind, what: &str) -> StageKind {
    let extra = st
        .args
        .iter()
        .enumerate()
        .any(|(ai, _)| Some(ai) != corpus_arg);
    if extra {
        StageKind::Unsafe(format!("{what} supported only with no flags"))
    } else {
        bare
    }
}

fn stage_kind(st: &Stage, corpus_arg: Option<usize>) -> StageKind {
    match st.tool.as_str() {
        "rg" | "grep" => grep_kind(st, corpus_arg),
        "sed" => sed_kind(st, corpus_arg),
        "cut" => cut_kind(st),
        "tr" => tr_kind(st),
        "head" => head_kind(st, corpus_arg),
        "wc" => wc_kind(st, corpus_arg),
        "sort" => bare_kind(st, corpus_arg, StageKind::Sort, "sort"),
        "uniq" => bare_kind(st, corpus_arg, StageKind::Uniq, "uniq"),
        "awk" => StageKind::Unsafe("awk is globally stateful".into()),
        "tail" => StageKind::Unsafe("tail depends on the global suffix".into()),
        "cat" | "find" | "ls" => {
            StageKind::Unsafe(format!("{} is not supported for parallel execution", st.tool))
        }
        other => StageKind::Unsafe(format!("unknown tool {other}")),
    }
}

fn kind_at(p: &Pipeline, idx: usize) -> StageKind {
    let corpus_arg = if idx == 0 { p.corpus_arg } else { None };
    stage_kind(&p.stages[idx], corpus_arg)
}

/// Per-stage safety check: unsafe stages force sequential execution.
pub fn is_unsafe(st: &Stage) -> SafetyVerdict {
    match stage_kind(st, None) {
        StageKind::Unsafe(reason) => SafetyVerdict::unsafe_because(&reason),
        _ => SafetyVerdict::safe(),
    }
}

/// True for per-line maps/filters that commute with concatenation.
pub fn is_stateless(st: &Stage) -> bool {
    matches!(stage_kind(st, None), StageKind::Stateless)
}

/// Decide which reduction strategy a pipeline admits.
///
/// Total: every valid pipeline gets a strategy, with Sequential as the
/// conservative default.
pub fn classify(p: &Pipeline) -> ReductionStrategy {
    let first_tool = p.stages[0].tool.as_str();
    if first_tool != "rg" && first_tool != "grep" {
        return ReductionStrategy::Sequential;
    }
    // Without a corpus operand there is nothing to rebind per shard.
    if p.corpus_arg.is_none() {
        return ReductionStrategy::Sequential;
    }
    let kinds: Vec<StageKind> = (0..p.stages.len()).map(|i| kind_at(p, i)).collect();
    if kinds.iter().any(|k| matches!(k, StageKind::Unsafe(_))) {
        return ReductionStrategy::Sequential;
    }
    let m = kinds.len();
    let stateless_through = |end: usize| kinds[..end].iter().all(|k| *k == StageKind::Stateless);

    if let StageKind::HeadN(n) = kinds[m - 1] {
        if stateless_through(m - 1) {
            return ReductionStrategy::Head { n };
        }
    }
    if kinds[m - 1] == StageKind::WcL && stateless_through(m - 1) {
        return ReductionStrategy::Count;
    }
    if let StageKind::HeadN(n) = kinds[m - 1] {
        if m >= 2 && kinds[m - 2] == StageKind::Sort && stateless_through(m - 2) {
            return ReductionStrategy::SortHead { n, with_uniq: false };
        }
        if m >= 3
            && kinds[m - 2] == StageKind::Uniq
            && kinds[m - 3] == StageKind::Sort
            && stateless_through(m - 3)
        {
            return ReductionStrategy::SortHead { n, with_uniq: true };
        }
    }
    if stateless_through(m) {
        return ReductionStrategy::Concat;
    }
    ReductionStrategy::Sequential
}
