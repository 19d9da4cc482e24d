//! Trace-driven simulator and policy library for KV-cache eviction in
//! multi-turn LLM serving, focused on tail latency.
//!
//! The crate is organized around six pieces:
//!
//! - [`trace`]: canonical conversation traces, block quantization, and
//!   per-conversation history accounting.
//! - [`workload`]: trace ingestion plus a stochastic conversation generator
//!   (birth-death conversations, Poisson turns, random prompt/response
//!   lengths).
//! - [`policy`]: cache state and the online eviction policies, from plain
//!   LRU through the tail-optimized and belief-weighted variants, plus the
//!   clairvoyant tail-optimized Belady benchmark.
//! - [`oracle`]: an exact hindsight solver for the tail-excess-latency
//!   integer program on micro-instances, used to certify the policies.
//! - [`metrics`]: the linear TTFT model, tail-excess latency, percentiles,
//!   SLO violations, and KV-cache byte sizing.
//! - [`sim`]: the event-driven replay engine binding traces, policies, and
//!   metrics, with comparison sweeps, oracle certification runs, and
//!   Monte-Carlo policy tests.
//!
//! All cache accounting is in blocks. TTFT is always modeled (`alpha` times
//! uncached blocks), never measured.

pub mod error;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod sim;
pub mod trace;
pub mod workload;

pub use error::{Error, Result};
pub use metrics::{LatencyModel, MetricsReport, RequestRecord};
pub use policy::{CacheState, CachingMode, EvictionDecision, PolicyConfig, PolicyFamily};
pub use trace::{ConversationId, ConversationLedger, Trace, TurnEvent};
pub use workload::{PromptLengthDistribution, SyntheticParams};
