//! Canonical conversation traces, block quantization, and per-conversation
//! history accounting.
//!
//! A trace is a time-ordered list of conversation turns. Each turn carries
//! pre-counted prompt and response sizes in blocks; no text is ever stored.
//! Every other module consumes traces read-only, so a constructed trace is
//! safe to share across parallel simulation runs.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conversation ids are dense non-negative integers assigned in
/// first-arrival order.
pub type ConversationId = u32;

/// One conversation turn: a user prompt followed by a model response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnEvent {
    pub conversation_id: ConversationId,
    /// Arrival time in seconds. Strictly increasing within a conversation.
    pub timestamp: f64,
    /// Prompt length in blocks. At least 1 for every real turn.
    pub prompt_blocks: u64,
    /// Response length in blocks. Revealed only after the request is served;
    /// online policies never read it ahead of time.
    pub response_blocks: u64,
    /// Ground-truth continuation flag: true on the conversation's final turn.
    /// Consumed only by the end-aware / length-aware variants and the
    /// clairvoyant Belady policy.
    pub is_last_turn: bool,
}

/// A time-ordered sequence of turns plus the block size they were quantized
/// with. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub events: Vec<TurnEvent>,
    /// Tokens per block. 1 keeps simulator numbers directly comparable with
    /// token counts.
    pub block_size: u32,
}

impl Trace {
    pub fn new(events: Vec<TurnEvent>, block_size: u32) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be >= 1".into()));
        }
        Ok(Trace { events, block_size })
    }

    /// Number of turns in the trace.
    pub fn horizon(&self) -> usize {
        self.events.len()
    }

    /// Number of distinct conversations.
    pub fn conversation_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        for e in &self.events {
            seen.insert(e.conversation_id);
        }
        seen.len()
    }

    /// Sort events globally by timestamp, ties broken by conversation id
    /// ascending, and renumber conversations densely in first-arrival order.
    pub fn normalize(&mut self) {
        self.events.sort_by(|a, b| {
            a.timestamp
                .total_cmp(&b.timestamp)
                .then(a.conversation_id.cmp(&b.conversation_id))
        });
        let mut remap: HashMap<ConversationId, ConversationId> = HashMap::new();
        for event in &mut self.events {
            let next = remap.len() as ConversationId;
            let id = *remap.entry(event.conversation_id).or_insert(next);
            event.conversation_id = id;
        }
    }

    /// Write the canonical newline-delimited JSON form: one object per turn
    /// with token counts (`blocks * block_size`).
    pub fn write_ndjson<W: Write>(&self, mut writer: W) -> Result<()> {
        for event in &self.events {
            let record = TraceRecord {
                conversation_id: event.conversation_id,
                timestamp: event.timestamp,
                prompt_tokens: event.prompt_blocks * self.block_size as u64,
                response_tokens: event.response_blocks * self.block_size as u64,
                is_last_turn: event.is_last_turn,
            };
            serde_json::to_writer(&mut writer, &record)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// On-disk trace record. Token fields are converted to blocks on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub conversation_id: ConversationId,
    pub timestamp: f64,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
    #[serde(default)]
    pub is_last_turn: bool,
}

/// Running per-conversation totals, updated as turns are replayed.
#[derive(Debug, Clone, Default)]
pub struct ConversationLedger {
    totals: HashMap<ConversationId, ConversationTotals>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConversationTotals {
    /// Total blocks in the conversation history: the sum of all prior prompt
    /// and response blocks. Non-decreasing over a conversation's lifetime.
    pub history_blocks: u64,
    pub turn_count: u64,
    pub last_turn_timestamp: f64,
}

impl ConversationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn totals(&self, id: ConversationId) -> ConversationTotals {
        self.totals.get(&id).copied().unwrap_or_default()
    }

    pub fn history_blocks(&self, id: ConversationId) -> u64 {
        self.totals(id).history_blocks
    }

    /// Fold a served turn into the ledger.
    pub fn record_turn(&mut self, event: &TurnEvent) {
        let entry = self.totals.entry(event.conversation_id).or_default();
        entry.history_blocks += event.prompt_blocks + event.response_blocks;
        entry.turn_count += 1;
        entry.last_turn_timestamp = event.timestamp;
    }
}

/// Ceiling division of a token count into blocks.
///
/// Returns 0 only when `tokens` is 0.
pub fn tokens_to_blocks(tokens: u64, block_size: u32) -> Result<u64> {
    if block_size == 0 {
        return Err(Error::InvalidConfig("block_size must be >= 1".into()));
    }
    Ok(tokens.div_ceil(block_size as u64))
}

/// Total blocks a request must have computed or cached: the conversation
/// history plus the arriving prompt.
///
/// The ledger must reflect all turns strictly before the arriving one.
pub fn job_size(ledger: &ConversationLedger, id: ConversationId, prompt_blocks: u64) -> u64 {
    ledger.history_blocks(id) + prompt_blocks
}

/// A single structural violation found in a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    /// Events are not globally sorted by (timestamp, conversation_id).
    UnsortedEvents { index: usize },
    /// Timestamps within one conversation are not strictly increasing.
    NonIncreasingConversationTime {
        index: usize,
        conversation_id: ConversationId,
    },
    /// A turn with no prompt is not a request.
    ZeroPromptBlocks { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsortedEvents { index } => {
                write!(f, "event {index}: out of global (timestamp, id) order")
            }
            Violation::NonIncreasingConversationTime {
                index,
                conversation_id,
            } => write!(
                f,
                "event {index}: timestamp not strictly increasing within conversation {conversation_id}"
            ),
            Violation::ZeroPromptBlocks { index } => {
                write!(f, "event {index}: prompt_blocks is 0")
            }
        }
    }
}

/// Every invariant violation found in a trace; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

/// Check every trace invariant and report all violations with event indices.
pub fn validate_trace(trace: &Trace) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut last_seen: HashMap<ConversationId, f64> = HashMap::new();

    for (index, event) in trace.events.iter().enumerate() {
        if event.prompt_blocks == 0 {
            report.violations.push(Violation::ZeroPromptBlocks { index });
        }
        if index > 0 {
            let prev = &trace.events[index - 1];
            let ordered = prev.timestamp < event.timestamp
                || (prev.timestamp == event.timestamp
                    && prev.conversation_id < event.conversation_id);
            if !ordered {
                report.violations.push(Violation::UnsortedEvents { index });
            }
        }
        if let Some(&prev_ts) = last_seen.get(&event.conversation_id) {
            if event.timestamp <= prev_ts {
                report
                    .violations
                    .push(Violation::NonIncreasingConversationTime {
                        index,
                        conversation_id: event.conversation_id,
                    });
            }
        }
        last_seen.insert(event.conversation_id, event.timestamp);
    }
    report
}
