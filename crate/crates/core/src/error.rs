//! Crate-wide error type.

use crate::trace::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of its documented domain.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A trace file line failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A loaded trace violated its structural invariants.
    #[error("trace validation failed:\n{0}")]
    InvalidTrace(ValidationReport),

    /// Forced caching cannot fit a conversation's full history in the cache.
    #[error(
        "capacity infeasible under forced caching: conversation {conversation_id} \
         needs {history_blocks} blocks but capacity is {capacity}"
    )]
    CapacityInfeasible {
        conversation_id: u32,
        history_blocks: u64,
        capacity: u64,
    },

    /// A clairvoyant policy was run without the future-arrival map it needs.
    #[error("clairvoyance error: {0}")]
    Clairvoyance(String),

    /// A hindsight instance exceeds the exhaustive solver's bounds.
    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),

    /// Error while processing a specific trace event during replay.
    #[error("replay failed at event {event_index}: {source}")]
    AtEvent {
        event_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Tag an error with the trace event index it occurred at.
    pub fn at_event(self, event_index: usize) -> Error {
        Error::AtEvent {
            event_index,
            source: Box::new(self),
        }
    }
}
