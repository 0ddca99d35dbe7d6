//! Line-aligned corpus sharding with a checksummed manifest.
//!
//! Shard i of an L-line corpus receives lines ceil(L*(i-1)/S)+1 through
//! ceil(L*i/S); concatenating the shard files in order reproduces the corpus
//! byte-for-byte. Sharding is idempotent: a manifest matching the corpus
//! digest and shard count is reused without rewriting anything.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_NAME: &str = "manifest.json";
const LOCK_NAME: &str = ".shard.lock";
const DIGEST_ALGO: &str = "sha256";

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("invalid shard count: {0}")]
    InvalidShardCount(u64),
    #[error("shard directory is locked by another writer: {0}")]
    Locked(PathBuf),
    #[error("manifest is malformed: {0}")]
    MalformedManifest(String),
    #[error("io failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ShardEntry {
    /// File name relative to the shard directory.
    pub path: String,
    pub lines: u64,
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub digest_algo: String,
    pub corpus_digest: String,
    pub corpus_lines: u64,
    pub corpus_bytes: u64,
    pub created_at: u64,
    pub shards: Vec<ShardEntry>,
}

/// A sharded corpus: the manifest plus resolved on-disk locations.
#[derive(Debug, Clone)]
pub struct ShardSet {
    pub corpus_path: PathBuf,
    pub shard_dir: PathBuf,
    pub manifest: Manifest,
}

impl ShardSet {
    pub fn count(&self) -> usize {
        self.manifest.shards.len()
    }

    pub fn shard_paths(&self) -> Vec<PathBuf> {
        self.manifest.shards.iter().map(|s| self.shard_dir.join(&s.path)).collect()
    }

    /// Load an existing shard set from its manifest.
    pub fn load(corpus_path: &Path, shard_dir: &Path) -> Result<ShardSet, ShardError> {
        let raw = fs::read(shard_dir.join(MANIFEST_NAME))?;
        let manifest: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| ShardError::MalformedManifest(e.to_string()))?;
        Ok(ShardSet {
            corpus_path: corpus_path.to_path_buf(),
            shard_dir: shard_dir.to_path_buf(),
            manifest,
        })
    }
}

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn acquire_lock(shard_dir: &Path) -> Result<LockGuard, ShardError> {
    let path = shard_dir.join(LOCK_NAME);
    match OpenOptions::new().write(true).create_new(true).open(&path) {
        Ok(_) => Ok(LockGuard { path }),
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(ShardError::Locked(path)),
        Err(e) => Err(e.into()),
    }
}

/// Stream the corpus once, returning (digest, line count, byte count).
/// A trailing run of bytes without a final newline counts as one line.
fn scan_corpus(path: &Path) -> Result<(String, u64, u64), ShardError> {
    let mut reader = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut hasher = Sha256::new();
    let mut lines = 0u64;
    let mut bytes = 0u64;
    let mut last: u8 = b'\n';
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        let chunk = &buf[..n];
        hasher.update(chunk);
        bytes += n as u64;
        lines += chunk.iter().filter(|&&b| b == b'\n').count() as u64;
        last = chunk[n - 1];
    }
    if bytes > 0 && last != b'\n' {
        lines += 1; // unterminated final line
    }
    Ok((hex::encode(hasher.finalize()), lines, bytes))
}

fn shard_file_name(index: usize, total: usize) -> String {
    let width = total.to_string().len().max(3);
    format!("shard.{index:0width$}.part")
}

/// Lines shard `i` (0-based) receives out of `l` total across `s` shards.
fn shard_line_span(l: u64, s: u64, i: u64) -> (u64, u64) {
    let start = l * i / s + u64::from(l * i % s != 0); // ceil(l*i/s)
    let end = l * (i + 1) / s + u64::from(l * (i + 1) % s != 0);
    (start, end)
}

/// Split the corpus into `s` line-aligned shard files under `shard_dir`.
///
/// Idempotent: an existing manifest with a matching corpus digest and shard
/// count is reused without rewriting.
pub fn shard(corpus: &Path, s: u64, shard_dir: &Path) -> Result<ShardSet, ShardError> {
    if s < 1 {
        return Err(ShardError::InvalidShardCount(s));
    }
    fs::create_dir_all(shard_dir)?;
    let (corpus_digest, corpus_lines, corpus_bytes) = scan_corpus(corpus)?;

    if let Ok(existing) = ShardSet::load(corpus, shard_dir) {
        if existing.manifest.corpus_digest == corpus_digest
            && existing.manifest.shards.len() as u64 == s
        {
            return Ok(existing);
        }
    }

    let _lock = acquire_lock(shard_dir)?;

    let mut reader = BufReader::with_capacity(1 << 20, File::open(corpus)?);
    let mut entries = Vec::with_capacity(s as usize);
    let mut line = Vec::new();
    for i in 0..s {
        let (start, end) = shard_line_span(corpus_lines, s, i);
        let name = shard_file_name(i as usize, s as usize);
        let path = shard_dir.join(&name);
        let mut hasher = Sha256::new();
        let mut writer = BufWriter::with_capacity(1 << 20, File::create(&path)?);
        let mut written_lines = 0u64;
        for _ in start..end {
            line.clear();
            read_line_bytes(&mut reader, &mut line)?;
            hasher.update(&line);
            writer.write_all(&line)?;
            written_lines += 1;
        }
        writer.flush()?;
        entries.push(ShardEntry {
            path: name,
            lines: written_lines,
            digest: hex::encode(hasher.finalize()),
        });
    }

    let manifest = Manifest {
        digest_algo: DIGEST_ALGO.to_string(),
        corpus_digest,
        corpus_lines,
        corpus_bytes,
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs(),
        shards: entries,
    };
    // Atomic replace: write next to the manifest, then rename over it.
    let tmp = shard_dir.join(format!("{MANIFEST_NAME}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    fs::rename(&tmp, shard_dir.join(MANIFEST_NAME))?;

    Ok(ShardSet {
        corpus_path: corpus.to_path_buf(),
        shard_dir: shard_dir.to_path_buf(),
        manifest,
    })
}

/// Read one line including its newline; the final line may be unterminated.
fn read_line_bytes(reader: &mut impl io::BufRead, out: &mut Vec<u8>) -> io::Result<usize> {
    reader.read_until(b'\n', out)
}

/// True iff the shards reconstruct the corpus: the concatenation digest
/// matches, every per-shard digest matches, and line counts add up.
pub fn verify(ss: &ShardSet) -> Result<bool, ShardError> {
    let mut concat_hasher = Sha256::new();
    let mut total_lines = 0u64;
    for entry in &ss.manifest.shards {
        let path = ss.shard_dir.join(&entry.path);
        let mut reader = match File::open(&path) {
            Ok(f) => BufReader::with_capacity(1 << 20, f),
            Err(_) => return Ok(false),
        };
        let mut shard_hasher = Sha256::new();
        let mut lines = 0u64;
        let mut last = b'\n';
        let mut any = false;
        let mut buf = [0u8; 1 << 16];
        loop {
            let n = reader.read(&mut buf)?;
            if n == 0 {
                break;
            }
            any = true;
            let chunk = &buf[..n];
            concat_hasher.update(chunk);
            shard_hasher.update(chunk);
            lines += chunk.iter().filter(|&&b| b == b'\n').count() as u64;
            last = chunk[n - 1];
        }
        if any && last != b'\n' {
            lines += 1;
        }
        if hex::encode(shard_hasher.finalize()) != entry.digest || lines != entry.lines {
            return Ok(false);
        }
        total_lines += lines;
    }
    let concat_digest = hex::encode(concat_hasher.finalize());
    Ok(concat_digest == ss.manifest.corpus_digest && total_lines == ss.manifest.corpus_lines)
}

/// Read every shard end-to-end (page-cache warming). Returns bytes read.
pub fn warm(ss: &ShardSet) -> Result<u64, ShardError> {
    let mut total = 0u64;
    let mut buf = vec![0u8; 1 << 20];
    for path in ss.shard_paths() {
        let mut f = File::open(&path)?;
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            total += n as u64;
        }
    }
    Ok(total)
}
