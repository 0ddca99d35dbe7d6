//! Merging per-shard outputs into the final byte stream.
//!
//! Each reducer reproduces, byte for byte, what the sequential pipeline
//! would have printed. The k-way merge implements `sort -m` semantics under
//! LC_ALL=C: bytewise-ascending line order, stable across shard index.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::exec::ShardResult;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReduceError {
    #[error("shard {shard} produced a malformed count: {text:?}")]
    MalformedCount { shard: i32, text: String },
    #[error("shard {shard} stream is not sorted")]
    UnsortedInput { shard: i32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedOutput {
    pub stdout: Vec<u8>,
    /// Lines touched while merging; a work metric for telemetry.
    pub lines_examined: u64,
}

/// Split a byte buffer into lines. The content excludes the newline; an
/// unterminated trailing run counts as a final line.
fn lines(buf: &[u8]) -> impl Iterator<Item = &[u8]> {
    buf.split_inclusive(|&b| b == b'\n')
}

fn line_content(line: &[u8]) -> &[u8] {
    line.strip_suffix(b"\n").unwrap_or(line)
}

/// Concatenate shard stdouts in shard order.
pub fn reduce_concat(results: &[ShardResult]) -> MergedOutput {
    let mut stdout = Vec::with_capacity(results.iter().map(|r| r.stdout.len()).sum());
    let mut examined = 0u64;
    for r in results {
        examined += lines(&r.stdout).count() as u64;
        stdout.extend_from_slice(&r.stdout);
    }
    MergedOutput { stdout, lines_examined: examined }
}

/// First `n` lines of the shard-order concatenation.
pub fn reduce_head(results: &[ShardResult], n: u64) -> MergedOutput {
    let mut stdout = Vec::new();
    let mut taken = 0u64;
    'outer: for r in results {
        for line in lines(&r.stdout) {
            if taken == n {
                break 'outer;
            }
            stdout.extend_from_slice(line);
            taken += 1;
        }
    }
    MergedOutput { stdout, lines_examined: taken }
}

/// Sum per-shard scalar counts, formatted as `wc -l` prints when reading a
/// pipe: the decimal sum and one newline, no padding.
pub fn reduce_count(results: &[ShardResult]) -> Result<MergedOutput, ReduceError> {
    let mut sum: u64 = 0;
    for r in results {
        let text = String::from_utf8_lossy(&r.stdout);
        let trimmed = text.trim();
        let value: u64 = trimmed.parse().map_err(|_| ReduceError::MalformedCount {
            shard: r.shard_index,
            text: trimmed.to_string(),
        })?;
        sum += value;
    }
    Ok(MergedOutput {
        stdout: format!("{sum}\n").into_bytes(),
        lines_examined: results.len() as u64,
    })
}

/// Merge bytewise-sorted streams into one sorted stream (`sort -m` under
/// LC_ALL=C). Ties are emitted in ascending stream index for determinism.
pub fn kway_merge(streams: &[&[u8]]) -> Result<Vec<u8>, ReduceError> {
    let mut merged = Vec::new();
    merge_lines(streams, |line| {
        merged.extend_from_slice(line_content(line));
        merged.push(b'\n');
        true
    })?;
    Ok(merged)
}

/// Core merge loop; the sink returns false to stop early.
fn merge_lines(
    streams: &[&[u8]],
    mut sink: impl FnMut(&[u8]) -> bool,
) -> Result<u64, ReduceError> {
    let mut iters: Vec<_> = streams.iter().map(|s| lines(s)).collect();
    // Min-heap keyed on (line content, stream index).
    let mut heap: BinaryHeap<Reverse<(&[u8], usize, &[u8])>> = BinaryHeap::new();
    for (i, it) in iters.iter_mut().enumerate() {
        if let Some(line) = it.next() {
            heap.push(Reverse((line_content(line), i, line)));
        }
    }
    let mut examined = 0u64;
    while let Some(Reverse((content, i, line))) = heap.pop() {
        examined += 1;
        if let Some(next) = iters[i].next() {
            let next_content = line_content(next);
            if next_content < content {
                return Err(ReduceError::UnsortedInput { shard: i as i32 });
            }
            heap.push(Reverse((next_content, i, next)));
        }
        if !sink(line) {
            break;
        }
    }
    Ok(examined)
}

/// Global merge for SORTHEAD: k-way merge, optional adjacency dedup, head n.
pub fn reduce_sorthead(
    results: &[ShardResult],
    n: u64,
    with_uniq: bool,
) -> Result<MergedOutput, ReduceError> {
    let streams: Vec<&[u8]> = results.iter().map(|r| r.stdout.as_slice()).collect();
    let mut stdout = Vec::new();
    let mut last: Option<Vec<u8>> = None;
    let mut taken = 0u64;
    let examined = merge_lines(&streams, |line| {
        let content = line_content(line);
        if with_uniq {
            if last.as_deref() == Some(content) {
                return true;
            }
            last = Some(content.to_vec());
        }
        stdout.extend_from_slice(content);
        stdout.push(b'\n');
        taken += 1;
        taken < n
    })?;
    Ok(MergedOutput { stdout, lines_examined: examined })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(stdout: &[u8]) -> ShardResult {
        ShardResult {
            shard_index: 0,
            stdout: stdout.to_vec(),
            stderr: Vec::new(),
            exit_code: 0,
            duration_ms: 0.0,
            capped: false,
        }
    }

    #[test]
    fn concat_preserves_order() {
        let out = reduce_concat(&[result(b"a\n"), result(b""), result(b"b\n")]);
        assert_eq!(out.stdout, b"a\nb\n");
        let out = reduce_concat(&[result(b"x\ny\n")]);
        assert_eq!(out.stdout, b"x\ny\n");
    }

    #[test]
    fn head_prefix_semantics() {
        let out = reduce_head(&[result(b"x\ny\n"), result(b"z\nw\n")], 3);
        assert_eq!(out.stdout, b"x\ny\nz\n");
        let out = reduce_head(&[result(b"x\n")], 10);
        assert_eq!(out.stdout, b"x\n");
    }

    #[test]
    fn count_sums_and_formats() {
        let out = reduce_count(&[result(b"2\n"), result(b"3\n"), result(b"0\n")]).unwrap();
        assert_eq!(out.stdout, b"5\n");
        let out = reduce_count(&[result(b"0\n"), result(b"0\n")]).unwrap();
        assert_eq!(out.stdout, b"0\n");
        // wc padding, if a build ever produced it, still parses.
        let out = reduce_count(&[result(b"   7\n")]).unwrap();
        assert_eq!(out.stdout, b"7\n");
    }

    #[test]
    fn count_rejects_garbage() {
        assert_eq!(
            reduce_count(&[result(b"not a number\n")]),
            Err(ReduceError::MalformedCount { shard: 0, text: "not a number".into() })
        );
    }

    #[test]
    fn merge_basic() {
        assert_eq!(kway_merge(&[b"a\nc\n", b"b\n"]).unwrap(), b"a\nb\nc\n");
        assert_eq!(kway_merge(&[b"a\n", b"a\n"]).unwrap(), b"a\na\n");
        assert_eq!(kway_merge(&[]).unwrap(), b"");
        assert_eq!(kway_merge(&[b"", b"x\n"]).unwrap(), b"x\n");
    }

    #[test]
    fn merge_detects_unsorted() {
        assert_eq!(
            kway_merge(&[b"b\na\n"]),
            Err(ReduceError::UnsortedInput { shard: 0 })
        );
    }

    #[test]
    fn sorthead_with_uniq() {
        let out = reduce_sorthead(&[result(b"a\nb\n"), result(b"a\nc\n")], 2, true).unwrap();
        assert_eq!(out.stdout, b"a\nb\n");
    }

    #[test]
    fn sorthead_without_uniq_keeps_duplicates() {
        let out = reduce_sorthead(&[result(b"a\n"), result(b"a\n")], 10, false).unwrap();
        assert_eq!(out.stdout, b"a\na\n");
    }

    #[test]
    fn sorthead_duplicate_flood_counterexample() {
        // Locally deduped shard outputs preserve the second-distinct line.
        let out = reduce_sorthead(&[result(b"a\nb\n"), result(b"c\n")], 2, true).unwrap();
        assert_eq!(out.stdout, b"a\nb\n");
    }
}
