//! Sharded-parallel execution engine for whitelisted Unix search pipelines.
//!
//! The engine accepts single-line shell pipelines built from a fixed tool
//! whitelist, classifies each pipeline into a reduction strategy, and either
//! runs it sequentially over the full corpus or fans it out across
//! line-aligned corpus shards. Merged output is byte-identical to sequential
//! execution; anything that cannot be proven safe falls back to the
//! sequential path.

pub mod classify;
pub mod daemon;
pub mod engine;
pub mod exec;
pub mod harness;
pub mod pipeline;
pub mod qa;
pub mod reduce;
pub mod shards;

pub use classify::{classify, is_stateless, is_unsafe, ReductionStrategy, SafetyVerdict};
pub use engine::{Engine, EngineConfig, Outcome, Telemetry};
pub use exec::{ExecEnv, ShardResult};
pub use pipeline::{parse_pipeline, ParseError, Pipeline, PipelineParser, Stage};
pub use shards::ShardSet;
