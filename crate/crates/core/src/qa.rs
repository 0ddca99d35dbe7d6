//! Answer scoring: normalization, token-level F1, exact match, the binary
//! format gate, and the gated reward.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("empty reference set")]
    EmptyReferenceSet,
}

/// Token-level scores for one prediction against a reference set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub em: f64,
    pub reward: f64,
    pub format_ok: bool,
}

// ASCII and Unicode punctuation (general category P). Hyphens are removed
// without inserting a space, so "multi-hop" normalizes to "multihop".
static PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").unwrap());

/// Normalize answer text: Unicode lowercase, punctuation removed,
/// articles dropped, whitespace-tokenized.
pub fn normalize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped = PUNCT.replace_all(&lowered, "");
    stripped
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(|t| t.to_string())
        .collect()
}

fn multiset(tokens: &[String]) -> HashMap<&str, u64> {
    let mut counts = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Precision, recall, and F1 over normalized token multisets.
/// F1 is 0 when either side normalizes to nothing.
pub fn token_f1(pred: &str, gold: &str) -> (f64, f64, f64) {
    let p_tokens = normalize(pred);
    let g_tokens = normalize(gold);
    if p_tokens.is_empty() || g_tokens.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let p_counts = multiset(&p_tokens);
    let g_counts = multiset(&g_tokens);
    let overlap: u64 = p_counts
        .iter()
        .map(|(t, &c)| c.min(*g_counts.get(t).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = overlap as f64 / p_tokens.len() as f64;
    let r = overlap as f64 / g_tokens.len() as f64;
    (p, r, 2.0 * p * r / (p + r))
}

/// Maximum F1 over the reference set.
pub fn best_f1(pred: &str, refs: &[String]) -> Result<f64, ScoreError> {
    if refs.is_empty() {
        return Err(ScoreError::EmptyReferenceSet);
    }
    Ok(refs.iter().map(|r| token_f1(pred, r).2).fold(0.0, f64::max))
}

/// 1 iff the normalized prediction equals some normalized reference.
pub fn exact_match(pred: &str, refs: &[String]) -> Result<u8, ScoreError> {
    if refs.is_empty() {
        return Err(ScoreError::EmptyReferenceSet);
    }
    let p = normalize(pred);
    Ok(refs.iter().any(|r| normalize(r) == p) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Think,
    ToolCall,
    ToolResponse,
    Answer,
}

const TAGS: &[(Tag, &str, &str)] = &[
    (Tag::Think, "<think>", "</think>"),
    (Tag::ToolCall, "<tool_call>", "</tool_call>"),
    (Tag::ToolResponse, "<tool_response>", "</tool_response>"),
    (Tag::Answer, "<answer>", "</answer>"),
];

/// Structural validity gate over a trajectory's tag layout.
///
/// Valid trajectories are cycles of reasoning, tool invocation, and tool
/// response, optionally a final reasoning block, then exactly one answer
/// block that the text terminates in. No text outside blocks, no nesting.
pub fn format_gate(trajectory: &str) -> u8 {
    let mut blocks: Vec<Tag> = Vec::new();
    let mut pos = 0usize;
    let bytes = trajectory.as_bytes();
    let mut open: Option<(Tag, &str)> = None;

    while pos < bytes.len() {
        match open {
            None => {
                // Outside any block: only whitespace until the next open tag.
                let rest = &trajectory[pos..];
                if let Some(rel) = rest.find('<') {
                    if !rest[..rel].chars().all(char::is_whitespace) {
                        return 0;
                    }
                    let at = &trajectory[pos + rel..];
                    let mut matched = false;
                    for (tag, open_tag, close_tag) in TAGS {
                        if at.starts_with(open_tag) {
                            open = Some((*tag, close_tag));
                            pos += rel + open_tag.len();
                            matched = true;
                            break;
                        }
                    }
                    if !matched {
                        return 0; // stray '<' outside a block is text
                    }
                } else {
                    if !rest.chars().all(char::is_whitespace) {
                        return 0;
                    }
                    break;
                }
            }
            Some((tag, close_tag)) => {
                let rest = &trajectory[pos..];
                let close_at = match rest.find(close_tag) {
                    Some(i) => i,
                    None => return 0, // unbalanced
                };
                // Any other special open tag before our close is an overlap.
                let body = &rest[..close_at];
                for (_, open_tag, _) in TAGS {
                    if body.contains(open_tag) {
                        return 0;
                    }
                }
                blocks.push(tag);
                pos += close_at + close_tag.len();
                open = None;
            }
        }
    }
    if open.is_some() {
        return 0;
    }

    // Grammar: (Think ToolCall ToolResponse)* Think? Answer
    let mut i = 0usize;
    while i + 3 <= blocks.len()
        && blocks[i] == Tag::Think
        && blocks[i + 1] == Tag::ToolCall
        && blocks[i + 2] == Tag::ToolResponse
    {
        i += 3;
    }
    if i < blocks.len() && blocks[i] == Tag::Think {
        i += 1;
    }
    (i + 1 == blocks.len() && blocks[i] == Tag::Answer) as u8
}

/// Content of the last answer block, if any.
pub fn last_answer(trajectory: &str) -> Option<&str> {
    let start = trajectory.rfind("<answer>")?;
    let body = &trajectory[start + "<answer>".len()..];
    let end = body.find("</answer>")?;
    Some(&body[..end])
}

/// Gated reward: format gate times the best F1 of the last answer block.
pub fn reward(trajectory: &str, refs: &[String]) -> Result<f64, ScoreError> {
    if refs.is_empty() {
        return Err(ScoreError::EmptyReferenceSet);
    }
    if format_gate(trajectory) == 0 {
        return Ok(0.0);
    }
    let answer = last_answer(trajectory).unwrap_or("");
    best_f1(answer, refs)
}

/// Precision/recall/F1 of the reference maximizing F1.
fn best_prf(pred: &str, refs: &[String]) -> Result<(f64, f64, f64), ScoreError> {
    if refs.is_empty() {
        return Err(ScoreError::EmptyReferenceSet);
    }
    Ok(refs
        .iter()
        .map(|r| token_f1(pred, r))
        .max_by(|a, b| a.2.total_cmp(&b.2))
        .unwrap())
}

/// Score a plain prediction (no trajectory) against a reference set.
pub fn score_prediction(pred: &str, refs: &[String]) -> Result<Score, ScoreError> {
    let (precision, recall, f1) = best_prf(pred, refs)?;
    let em = exact_match(pred, refs)? as f64;
    Ok(Score { precision, recall, f1, em, reward: f1, format_ok: true })
}

/// Score a full trajectory: reward is gated, F1/EM apply to the last answer.
pub fn score_trajectory(trajectory: &str, refs: &[String]) -> Result<Score, ScoreError> {
    let format_ok = format_gate(trajectory) == 1;
    let answer = last_answer(trajectory).unwrap_or("");
    let (precision, recall, f1) = best_prf(answer, refs)?;
    let em = exact_match(answer, refs)? as f64;
    Ok(Score {
        precision,
        recall,
        f1,
        em,
        reward: if format_ok { f1 } else { 0.0 },
        format_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The Oberoi Group."), vec!["oberoi", "group"]);
        assert_eq!(normalize("the"), Vec::<String>::new());
        assert_eq!(normalize("Rockstar San Diego"), vec!["rockstar", "san", "diego"]);
        assert_eq!(normalize("multi-hop"), vec!["multihop"]);
    }

    #[test]
    fn normalize_idempotent() {
        for s in ["The Oberoi Group.", "a an the", "Ünïcode — Text!", "İstanbul"] {
            let once = normalize(s);
            let again = normalize(&once.join(" "));
            assert_eq!(once, again, "input: {s}");
        }
    }

    #[test]
    fn f1_identity() {
        assert_eq!(token_f1("picric acid", "picric acid").2, 1.0);
    }

    #[test]
    fn f1_partial_overlap() {
        // {rockstar, games} vs {rockstar, san, diego}: o=1, p=1/2, r=1/3.
        let (p, r, f1) = token_f1("Rockstar Games", "Rockstar San Diego");
        assert_eq!(p, 0.5);
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn f1_empty_sides() {
        assert_eq!(token_f1("the", "the").2, 0.0);
        assert_eq!(token_f1("", "x").2, 0.0);
        assert_eq!(token_f1("x", "").2, 0.0);
    }

    #[test]
    fn best_f1_over_refs() {
        let r = refs(&["Istanbul", "İstanbul"]);
        assert_eq!(best_f1("Istanbul", &r).unwrap(), 1.0);
        assert_eq!(best_f1("unrelated words", &r).unwrap(), 0.0);
        assert_eq!(best_f1("x", &refs(&["x"])).unwrap(), token_f1("x", "x").2);
        assert_eq!(best_f1("x", &[]), Err(ScoreError::EmptyReferenceSet));
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match("the Oberoi Group", &refs(&["Oberoi Group"])).unwrap(), 1);
        assert_eq!(exact_match("Rockstar Games", &refs(&["Rockstar San Diego"])).unwrap(), 0);
        assert_eq!(exact_match("PICRIC ACID.", &refs(&["picric acid"])).unwrap(), 1);
    }

    const VALID: &str = "<think>reason</think><tool_call>rg -F x corpus.jsonl</tool_call>\
         <tool_response>x line</tool_response><think>done</think><answer>picric acid</answer>";

    #[test]
    fn gate_accepts_valid_trajectory() {
        assert_eq!(format_gate(VALID), 1);
        assert_eq!(format_gate("<answer>x</answer>"), 1);
        assert_eq!(format_gate("<think>t</think><answer>x</answer>\n  "), 1);
    }

    #[test]
    fn gate_rejects_malformed() {
        assert_eq!(format_gate("<think>t</think><answer>x"), 0, "missing close");
        assert_eq!(format_gate("<think>a<tool_call>b</tool_call></think><answer>x</answer>"), 0, "overlap");
        assert_eq!(format_gate("<answer>x</answer> trailing text"), 0);
        assert_eq!(format_gate("free text <answer>x</answer>"), 0);
        assert_eq!(format_gate("<answer>x</answer><answer>y</answer>"), 0, "two answers");
        assert_eq!(format_gate("<think>t</think>"), 0, "no answer");
        assert_eq!(
            format_gate("<tool_call>c</tool_call><think>t</think><answer>x</answer>"),
            0,
            "order violation"
        );
    }

    #[test]
    fn reward_gating() {
        let r = refs(&["picric acid"]);
        assert_eq!(reward(VALID, &r).unwrap(), 1.0);
        let malformed = "<think>t<answer>picric acid</answer>";
        assert_eq!(reward(malformed, &r).unwrap(), 0.0);
        let partial = VALID.replace("picric acid", "Rockstar Games");
        let gold = refs(&["Rockstar San Diego"]);
        assert!((reward(&partial, &gold).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn last_answer_extraction() {
        assert_eq!(last_answer("<answer>a</answer><answer>b</answer>"), Some("b"));
        assert_eq!(last_answer("no tags"), None);
    }
}
