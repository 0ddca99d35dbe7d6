//! Tokenizer, parser, and validator for agent-issued command strings.
//!
//! The grammar is deliberately tiny: whitespace-separated words, single and
//! double quotes (both literal, no expansion of any kind), and the unquoted
//! pipe as the only operator. Everything else a shell would interpret
//! (redirection, chaining, substitution) is rejected outright.

use std::fmt;

use thiserror::Error;

/// Tools an agent command may invoke.
pub const TOOL_WHITELIST: &[&str] = &[
    "rg", "grep", "find", "sed", "awk", "head", "tail", "cat", "ls", "wc", "sort", "cut", "uniq",
    "tr",
];

/// Logical corpus file name the agent sees, unless overridden.
pub const DEFAULT_CORPUS_NAME: &str = "corpus.jsonl";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("command contains a newline")]
    ContainsNewline,
    #[error("empty command")]
    EmptyCommand,
    #[error("unterminated quote")]
    UnterminatedQuote,
    #[error("forbidden construct: {0}")]
    ForbiddenConstruct(String),
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("empty pipeline stage")]
    EmptyStage,
    #[error("unknown path operand: {0}")]
    UnknownPath(String),
}

/// One lexed token: a word (quotes resolved) or an unquoted pipe separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Word(String),
    Pipe,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Word(w) => f.write_str(w),
            Token::Pipe => f.write_str("|"),
        }
    }
}

/// One pipeline stage: a whitelisted tool plus its resolved arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub tool: String,
    pub args: Vec<String>,
}

impl Stage {
    pub fn new(tool: impl Into<String>, args: Vec<String>) -> Self {
        Stage { tool: tool.into(), args }
    }
}

/// A validated pipeline: ordered stages plus the location of the corpus
/// operand (an argument in the first stage equal to the logical corpus name).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pipeline {
    pub stages: Vec<Stage>,
    pub source: String,
    /// Index into `stages[0].args` of the corpus operand, when present.
    pub corpus_arg: Option<usize>,
}

impl Pipeline {
    pub fn has_corpus_operand(&self) -> bool {
        self.corpus_arg.is_some()
    }
}

struct LexOutput {
    tokens: Vec<Token>,
    forbidden: Option<String>,
}

fn lex(raw: &str) -> Result<LexOutput, ParseError> {
    if raw.contains('\n') || raw.contains('\r') {
        return Err(ParseError::ContainsNewline);
    }
    let mut tokens = Vec::new();
    let mut forbidden: Option<String> = None;
    let mut word = String::new();
    let mut in_word = false;
    let mut chars = raw.chars().peekable();

    let note = |s: &str, slot: &mut Option<String>| {
        if slot.is_none() {
            *slot = Some(s.to_string());
        }
    };

    while let Some(c) = chars.next() {
        match c {
            '\'' | '"' => {
                let quote = c;
                in_word = true;
                let mut closed = false;
                for q in chars.by_ref() {
                    if q == quote {
                        closed = true;
                        break;
                    }
                    word.push(q);
                }
                if !closed {
                    return Err(ParseError::UnterminatedQuote);
                }
            }
            c if c.is_whitespace() => {
                if in_word {
                    tokens.push(Token::Word(std::mem::take(&mut word)));
                    in_word = false;
                }
            }
            '|' => {
                if chars.peek() == Some(&'|') {
                    chars.next();
                    note("||", &mut forbidden);
                    continue;
                }
                if in_word {
                    tokens.push(Token::Word(std::mem::take(&mut word)));
                    in_word = false;
                }
                tokens.push(Token::Pipe);
            }
            '>' => note(">", &mut forbidden),
            '<' => note("<", &mut forbidden),
            ';' => note(";", &mut forbidden),
            '`' => note("`", &mut forbidden),
            '&' if chars.peek() == Some(&'&') => {
                chars.next();
                note("&&", &mut forbidden);
            }
            '$' if chars.peek() == Some(&'(') => {
                chars.next();
                note("$(", &mut forbidden);
            }
            c => {
                in_word = true;
                word.push(c);
            }
        }
    }
    if in_word {
        tokens.push(Token::Word(word));
    }
    Ok(LexOutput { tokens, forbidden })
}

/// Split a raw command into word and pipe-separator tokens.
///
/// No expansion is performed; quoted spans become literal word content.
pub fn tokenize(raw: &str) -> Result<Vec<Token>, ParseError> {
    Ok(lex(raw)?.tokens)
}

/// Parser configured with the logical corpus name the agent addresses.
#[derive(Debug, Clone)]
pub struct PipelineParser {
    corpus_name: String,
}

impl Default for PipelineParser {
    fn default() -> Self {
        PipelineParser { corpus_name: DEFAULT_CORPUS_NAME.to_string() }
    }
}

/// Per-tool argument shape used for path validation.
struct ToolArgSpec {
    /// Flags that consume the following token as an opaque value.
    value_flags: &'static [&'static str],
    /// Flags whose value names a host file; always rejected.
    path_flags: &'static [&'static str],
    /// Number of leading positional operands that are data (pattern,
    /// script, program, translation sets) rather than file paths.
    data_positionals: usize,
}

fn arg_spec(tool: &str, args: &[String]) -> ToolArgSpec {
    match tool {
        "rg" | "grep" => ToolArgSpec {
            value_flags: &[
                "-e", "-m", "-A", "-B", "-C", "--context", "-r", "--replace", "-t", "--type",
                "-j", "--threads", "--max-count", "--max-columns", "-M", "--regexp",
            ],
            path_flags: &["-f", "--file"],
            // The first positional is the pattern unless -e/--regexp supplied it.
            data_positionals: if args.iter().any(|a| a == "-e" || a == "--regexp") { 0 } else { 1 },
        },
        "sed" => ToolArgSpec {
            value_flags: &["-e", "--expression"],
            path_flags: &["-f", "--file"],
            data_positionals: if args.iter().any(|a| a == "-e" || a == "--expression") {
                0
            } else {
                1
            },
        },
        "awk" => ToolArgSpec {
            value_flags: &["-F", "-v"],
            path_flags: &["-f", "--file"],
            data_positionals: if args.iter().any(|a| a == "-f" || a == "--file") { 0 } else { 1 },
        },
        "head" | "tail" => ToolArgSpec {
            value_flags: &["-n", "-c"],
            path_flags: &[],
            data_positionals: 0,
        },
        "sort" => ToolArgSpec {
            value_flags: &["-k", "-t", "-S", "--buffer-size", "--parallel"],
            path_flags: &["-o", "--output", "-T"],
            data_positionals: 0,
        },
        "cut" => ToolArgSpec {
            value_flags: &["-d", "-f", "-c", "-b"],
            path_flags: &[],
            data_positionals: 0,
        },
        "tr" => ToolArgSpec { value_flags: &[], path_flags: &[], data_positionals: 2 },
        "find" => ToolArgSpec {
            value_flags: &["-name", "-iname", "-type", "-path", "-maxdepth", "-mindepth"],
            path_flags: &[],
            data_positionals: 0,
        },
        // wc, cat, ls, uniq: positionals are file operands.
        _ => ToolArgSpec { value_flags: &[], path_flags: &[], data_positionals: 0 },
    }
}

impl PipelineParser {
    pub fn new(corpus_name: impl Into<String>) -> Self {
        PipelineParser { corpus_name: corpus_name.into() }
    }

    pub fn corpus_name(&self) -> &str {
        &self.corpus_name
    }

    /// Parse and validate a raw command into a whitelisted pipeline.
    pub fn parse(&self, raw: &str) -> Result<Pipeline, ParseError> {
        let lexed = lex(raw)?;
        if let Some(construct) = lexed.forbidden {
            return Err(ParseError::ForbiddenConstruct(construct));
        }
        if lexed.tokens.is_empty() {
            return Err(ParseError::EmptyCommand);
        }

        let mut stages: Vec<Stage> = Vec::new();
        let mut current: Vec<String> = Vec::new();
        for tok in lexed.tokens {
            match tok {
                Token::Word(w) => current.push(w),
                Token::Pipe => {
                    if current.is_empty() {
                        return Err(ParseError::EmptyStage);
                    }
                    let mut words = std::mem::take(&mut current).into_iter();
                    let tool = words.next().unwrap();
                    stages.push(Stage { tool, args: words.collect() });
                }
            }
        }
        if current.is_empty() {
            return Err(ParseError::EmptyStage);
        }
        let mut words = current.into_iter();
        let tool = words.next().unwrap();
        stages.push(Stage { tool, args: words.collect() });

        for st in &stages {
            if !TOOL_WHITELIST.contains(&st.tool.as_str()) {
                return Err(ParseError::UnknownTool(st.tool.clone()));
            }
        }

        let corpus_arg = self.validate_paths(&stages)?;
        Ok(Pipeline { stages, source: raw.to_string(), corpus_arg })
    }

    /// Walk every stage's arguments, rejecting any operand that names a host
    /// file. The logical corpus name is accepted once, in the first stage.
    fn validate_paths(&self, stages: &[Stage]) -> Result<Option<usize>, ParseError> {
        let mut corpus_arg: Option<usize> = None;
        for (si, st) in stages.iter().enumerate() {
            let spec = arg_spec(&st.tool, &st.args);
            let mut data_left = spec.data_positionals;
            let mut skip_next = false;
            for (ai, arg) in st.args.iter().enumerate() {
                if skip_next {
                    skip_next = false;
                    continue;
                }
                if spec.path_flags.contains(&arg.as_str()) {
                    return Err(ParseError::UnknownPath(format!("{} {}", arg, "<file>")));
                }
                if spec.value_flags.contains(&arg.as_str()) {
                    skip_next = true;
                    continue;
                }
                if arg.starts_with('-') && arg.len() > 1 {
                    continue; // flag; values handled above, attached forms are opaque
                }
                // Positional operand.
                if data_left > 0 {
                    data_left -= 1;
                    continue;
                }
                if arg == &self.corpus_name {
                    if si == 0 && corpus_arg.is_none() {
                        corpus_arg = Some(ai);
                        continue;
                    }
                    return Err(ParseError::UnknownPath(arg.clone()));
                }
                return Err(ParseError::UnknownPath(arg.clone()));
            }
        }
        Ok(corpus_arg)
    }

    /// Canonical textual form; re-parsing it yields a stage-equal pipeline.
    pub fn render(&self, p: &Pipeline) -> String {
        p.stages
            .iter()
            .map(|st| {
                std::iter::once(quote_token(&st.tool))
                    .chain(st.args.iter().map(|a| quote_token(a)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

/// Quote a token so the tokenizer reproduces it verbatim.
fn quote_token(tok: &str) -> String {
    let needs_quoting = tok.is_empty()
        || tok.chars().any(|c| {
            c.is_whitespace() || matches!(c, '|' | '&' | ';' | '<' | '>' | '$' | '`' | '\'' | '"')
        });
    if !needs_quoting {
        return tok.to_string();
    }
    if !tok.contains('\'') {
        return format!("'{tok}'");
    }
    // Single quotes inside: emit them in double-quoted spans, the rest in
    // single-quoted spans. Adjacent quoted spans concatenate on re-parse.
    let mut out = String::new();
    for chunk in tok.split_inclusive('\'') {
        match chunk.strip_suffix('\'') {
            Some(rest) => {
                if !rest.is_empty() {
                    out.push_str(&format!("'{rest}'"));
                }
                out.push_str("\"'\"");
            }
            None => out.push_str(&format!("'{chunk}'")),
        }
    }
    out
}

/// Parse with the default logical corpus name.
pub fn parse_pipeline(raw: &str) -> Result<Pipeline, ParseError> {
    PipelineParser::default().parse(raw)
}
