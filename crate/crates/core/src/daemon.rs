//! Persistent engine daemon: length-prefixed JSON over a Unix socket.
//!
//! Wire format: a 4-byte big-endian unsigned length followed by exactly that
//! many bytes of UTF-8 JSON. Requests on one connection are answered in
//! arrival order; connections are handled concurrently over a shared
//! read-only engine.

use std::io::{self, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, Engine, Telemetry, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::exec::ExecEnv;
use crate::shards;

/// Frames larger than this are refused outright.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

/// Default socket path environment variable.
pub const SOCKET_ENV_VAR: &str = "SHARDPIPE_SOCKET";

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame exceeds {MAX_FRAME_LEN} bytes: {0}")]
    FrameTooLarge(u64),
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("io failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("failed to bind {path}: {source}")]
    BindFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("shard set failed verification; refusing to serve")]
    VerificationFailure,
    #[error("io failure: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Shard(#[from] shards::ShardError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RequestFrame {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseFrame {
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
    pub truncated: bool,
    pub telemetry: Telemetry,
}

/// Encode a value as a length-prefixed JSON frame.
pub fn encode_frame<T: Serialize>(value: &T) -> Result<Vec<u8>, FrameError> {
    let payload = serde_json::to_vec(value).map_err(|e| FrameError::MalformedJson(e.to_string()))?;
    if payload.len() as u64 > MAX_FRAME_LEN as u64 {
        return Err(FrameError::FrameTooLarge(payload.len() as u64));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decode one length-prefixed JSON frame from a byte slice.
pub fn decode_frame<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::TruncatedFrame);
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if len > MAX_FRAME_LEN {
        return Err(FrameError::FrameTooLarge(len as u64));
    }
    let payload = bytes.get(4..4 + len as usize).ok_or(FrameError::TruncatedFrame)?;
    serde_json::from_slice(payload).map_err(|e| FrameError::MalformedJson(e.to_string()))
}

/// Read one frame from a stream; Ok(None) on clean EOF before any byte.
pub fn read_frame<T: DeserializeOwned>(stream: &mut impl Read) -> Result<Option<T>, FrameError> {
    let mut len_buf = [0u8; 4];
    match stream.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(FrameError::FrameTooLarge(len as u64));
    }
    let mut payload = vec![0u8; len as usize];
    stream.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FrameError::TruncatedFrame
        } else {
            FrameError::Io(e)
        }
    })?;
    serde_json::from_slice(&payload).map_err(|e| FrameError::MalformedJson(e.to_string()))
}

pub fn write_frame<T: Serialize>(stream: &mut impl Write, value: &T) -> Result<(), FrameError> {
    let bytes = encode_frame(value)?;
    stream.write_all(&bytes)?;
    Ok(())
}

fn empty_telemetry(command: &str) -> Telemetry {
    Telemetry {
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

/// Handle one decoded request against the engine. Command-level failures
/// surface as exit code 2 with the error text on stderr, never as transport
/// errors.
pub fn handle(engine: &Engine, req: &RequestFrame) -> ResponseFrame {
    let max_tokens = req.max_output_tokens.unwrap_or(DEFAULT_MAX_OUTPUT_TOKENS).max(1);
    let env = match req.timeout_s {
        Some(secs) => ExecEnv { timeout: Duration::from_secs(secs), ..engine.env().clone() },
        None => engine.env().clone(),
    };
    match engine.run_with_env(&req.command, &env) {
        Ok(outcome) => {
            let (stdout, truncated) = engine::truncate_output(&outcome.stdout, max_tokens);
            ResponseFrame {
                stdout: String::from_utf8_lossy(&stdout).into_owned(),
                stderr: String::from_utf8_lossy(&outcome.stderr).into_owned(),
                exit_code: outcome.exit_code,
                truncated,
                telemetry: outcome.telemetry,
            }
        }
        Err(e) => ResponseFrame {
            stdout: String::new(),
            stderr: format!("shardpipe: {e}\n"),
            exit_code: 2,
            truncated: false,
            telemetry: empty_telemetry(&req.command),
        },
    }
}

/// Running daemon handle; shuts down and removes the socket on request.
pub struct DaemonHandle {
    shutdown: Arc<AtomicBool>,
    socket_path: PathBuf,
    accept_thread: Option<JoinHandle<()>>,
}

impl DaemonHandle {
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.socket_path);
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serve the engine on a Unix socket until shut down.
///
/// Refuses to start when the shard set fails verification; warms the page
/// cache before accepting. Telemetry records append as JSON lines to
/// `telemetry_path` when given.
pub fn serve(
    socket_path: &Path,
    engine: Arc<Engine>,
    shardset: Option<&shards::ShardSet>,
    telemetry_path: Option<PathBuf>,
) -> Result<DaemonHandle, DaemonError> {
    if let Some(ss) = shardset {
        if !shards::verify(ss)? {
            return Err(DaemonError::VerificationFailure);
        }
        shards::warm(ss)?;
    }

    let _ = std::fs::remove_file(socket_path);
    let listener = UnixListener::bind(socket_path).map_err(|source| DaemonError::BindFailure {
        path: socket_path.to_path_buf(),
        source,
    })?;
    listener.set_nonblocking(true)?;

    let shutdown = Arc::new(AtomicBool::new(false));
    let telemetry_writer: Arc<Option<Mutex<std::fs::File>>> = Arc::new(match telemetry_path {
        Some(p) => Some(Mutex::new(
            std::fs::OpenOptions::new().create(true).append(true).open(p)?,
        )),
        None => None,
    });

    let accept_shutdown = shutdown.clone();
    let accept_thread = std::thread::spawn(move || {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !accept_shutdown.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let engine = engine.clone();
                    let writer = telemetry_writer.clone();
                    workers.push(std::thread::spawn(move || {
                        let _ = serve_connection(stream, &engine, &writer);
                    }));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(_) => break,
            }
        }
        for w in workers {
            let _ = w.join();
        }
    });

    Ok(DaemonHandle {
        shutdown,
        socket_path: socket_path.to_path_buf(),
        accept_thread: Some(accept_thread),
    })
}

fn serve_connection(
    mut stream: UnixStream,
    engine: &Engine,
    telemetry: &Option<Mutex<std::fs::File>>,
) -> Result<(), FrameError> {
    stream.set_nonblocking(false)?;
    loop {
        let req: RequestFrame = match read_frame(&mut stream)? {
            Some(r) => r,
            None => return Ok(()),
        };
        let resp = handle(engine, &req);
        if let Some(writer) = telemetry {
            if let Ok(mut f) = writer.lock() {
                let _ = serde_json::to_writer(&mut *f, &resp.telemetry);
                let _ = f.write_all(b"\n");
            }
        }
        write_frame(&mut stream, &resp)?;
    }
}

/// Send one request to a running daemon and return its response.
pub fn client_request(socket_path: &Path, req: &RequestFrame) -> Result<ResponseFrame, FrameError> {
    let mut stream = UnixStream::connect(socket_path)?;
    write_frame(&mut stream, req)?;
    match read_frame(&mut stream)? {
        Some(resp) => Ok(resp),
        None => Err(FrameError::TruncatedFrame),
    }
}
