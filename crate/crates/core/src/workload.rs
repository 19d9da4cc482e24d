//! Trace sources: ingestion of recorded conversation data and synthesis from
//! a stochastic conversation model.
//!
//! The synthetic model is a continuous-time birth-death process:
//!
//! - new conversations are born by a Poisson process with rate
//!   `conversation_birth_rate`;
//! - each conversation lives for an exponential time with rate `death_rate`,
//!   emitting its first turn at birth and subsequent turns by a Poisson clock
//!   with rate `turn_rate` while alive;
//! - each turn draws prompt and response lengths independently from the
//!   configured distributions. Response lengths are known to the generator
//!   but never revealed to policies before a request is served.
//!
//! Randomness comes from a seedable ChaCha generator with one stream per
//! conversation: stream 0 drives the birth process, stream `1 + i` drives all
//! draws of conversation `i` (lifetime, turn clock, lengths). Per-conversation
//! draws are therefore reproducible independent of interleaving.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{tokens_to_blocks, validate_trace, Trace, TraceRecord, TurnEvent};

/// Probability tolerance when checking that a distribution sums to one.
const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Where a distribution's support came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistProvenance {
    #[default]
    Explicit,
    EmpiricalFromTrace,
}

/// Discrete distribution over block counts with survival-function queries.
///
/// Support is sorted ascending with distinct values; probabilities sum to one
/// within `1e-9`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct PromptLengthDistribution {
    support: Vec<(u64, f64)>,
    provenance: DistProvenance,
}

/// Accepted JSON shapes: `{"values": [...], "probs": [...]}` or
/// `{"empirical_from": "<trace path>"}`, the latter fitting the prompt
/// lengths observed in the referenced trace (token granularity).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawDistribution {
    Explicit {
        values: Vec<u64>,
        probs: Vec<f64>,
        #[serde(default)]
        provenance: DistProvenance,
    },
    EmpiricalFrom { empirical_from: String },
}

impl TryFrom<RawDistribution> for PromptLengthDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        match raw {
            RawDistribution::Explicit {
                values,
                probs,
                provenance,
            } => {
                if values.len() != probs.len() {
                    return Err(Error::InvalidConfig(
                        "distribution values and probs must have equal length".into(),
                    ));
                }
                let pairs: Vec<(u64, f64)> = values.into_iter().zip(probs).collect();
                let mut dist = PromptLengthDistribution::new(pairs)?;
                dist.provenance = provenance;
                Ok(dist)
            }
            RawDistribution::EmpiricalFrom { empirical_from } => {
                let trace = load_conversations_from_path(&empirical_from, 1, None)?;
                fit_prompt_distribution(&trace)
            }
        }
    }
}

impl From<PromptLengthDistribution> for RawDistribution {
    fn from(dist: PromptLengthDistribution) -> Self {
        RawDistribution::Explicit {
            values: dist.support.iter().map(|(v, _)| *v).collect(),
            probs: dist.support.iter().map(|(_, p)| *p).collect(),
            provenance: dist.provenance,
        }
    }
}

impl PromptLengthDistribution {
    /// Build from (block_count, probability) pairs. Pairs may arrive in any
    /// order; duplicates are rejected.
    pub fn new(mut pairs: Vec<(u64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidConfig("distribution has empty support".into()));
        }
        pairs.sort_by_key(|(v, _)| *v);
        for window in pairs.windows(2) {
            if window[0].0 == window[1].0 {
                return Err(Error::InvalidConfig(format!(
                    "duplicate support value {}",
                    window[0].0
                )));
            }
        }
        let total: f64 = pairs.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        if pairs.iter().any(|(_, p)| *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidConfig(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(PromptLengthDistribution {
            support: pairs,
            provenance: DistProvenance::Explicit,
        })
    }

    /// Point mass at a single block count.
    pub fn deterministic(blocks: u64) -> Self {
        PromptLengthDistribution {
            support: vec![(blocks, 1.0)],
            provenance: DistProvenance::Explicit,
        }
    }

    /// Two-point distribution with equal mass.
    pub fn two_point(low: u64, high: u64) -> Result<Self> {
        Self::new(vec![(low, 0.5), (high, 0.5)])
    }

    pub fn support(&self) -> &[(u64, f64)] {
        &self.support
    }

    pub fn provenance(&self) -> DistProvenance {
        self.provenance
    }

    pub fn min_value(&self) -> u64 {
        self.support[0].0
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().map(|(v, p)| *v as f64 * p).sum()
    }

    /// Survival function: `P(Q >= threshold)`. Thresholds at or below the
    /// minimum support value give 1.
    pub fn survival(&self, threshold: i64) -> f64 {
        self.support
            .iter()
            .filter(|(v, _)| *v as i64 >= threshold)
            .map(|(_, p)| p)
            .sum()
    }

    /// `E[(Q + shift)^+]`, the expected positive part of the shifted draw.
    pub fn expected_shifted_positive_part(&self, shift: i64) -> f64 {
        self.support
            .iter()
            .map(|(v, p)| {
                let excess = *v as i64 + shift;
                if excess > 0 {
                    excess as f64 * p
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let weights = WeightedIndex::new(self.support.iter().map(|(_, p)| *p))
            .expect("validated distribution has positive total weight");
        self.support[weights.sample(rng)].0
    }
}

/// Empirical distribution over the prompt lengths observed in a trace;
/// probabilities are relative frequencies.
pub fn fit_prompt_distribution(trace: &Trace) -> Result<PromptLengthDistribution> {
    if trace.events.is_empty() {
        return Err(Error::EmptyInput("cannot fit distribution to empty trace".into()));
    }
    let mut counts: std::collections::BTreeMap<u64, u64> = std::collections::BTreeMap::new();
    for event in &trace.events {
        *counts.entry(event.prompt_blocks).or_default() += 1;
    }
    let n = trace.events.len() as f64;
    let mut dist = PromptLengthDistribution::new(
        counts
            .into_iter()
            .map(|(v, c)| (v, c as f64 / n))
            .collect(),
    )?;
    dist.provenance = DistProvenance::EmpiricalFromTrace;
    Ok(dist)
}

/// Belief that a conversation silent for `elapsed` seconds is still active:
/// `exp(-death_rate * elapsed)`. Strictly decreasing in `elapsed` — the
/// longer the silence, the less likely the conversation ever returns.
pub fn belief_survival(death_rate: f64, elapsed: f64) -> Result<f64> {
    if death_rate <= 0.0 {
        return Err(Error::InvalidConfig("death_rate must be positive".into()));
    }
    if elapsed < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "elapsed must be non-negative, got {elapsed}"
        )));
    }
    Ok((-death_rate * elapsed).exp())
}

/// Parameters of the stochastic conversation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    /// Conversation birth rate per second.
    pub conversation_birth_rate: f64,
    /// Turn rate per second while a conversation is alive. Homogeneous
    /// default; per-conversation overrides keyed by arrival index.
    pub turn_rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turn_rate_overrides: Vec<(u32, f64)>,
    /// Conversation death rate per second.
    pub death_rate: f64,
    pub prompt_length_dist: PromptLengthDistribution,
    pub response_length_dist: PromptLengthDistribution,
    /// Generation stops once this many turns have been emitted.
    pub max_events: usize,
    pub seed: u64,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
}

fn default_block_size() -> u32 {
    1
}

/// Mean turns per conversation in the synthetic recipe shipped as a preset.
const PRESET_MEAN_TURNS: f64 = 3.5;

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("conversation_birth_rate", self.conversation_birth_rate),
            ("turn_rate", self.turn_rate),
            ("death_rate", self.death_rate),
        ] {
            if !rate.is_finite() || rate <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be strictly positive, got {rate}"
                )));
            }
        }
        if self
            .turn_rate_overrides
            .iter()
            .any(|(_, r)| !r.is_finite() || *r <= 0.0)
        {
            return Err(Error::InvalidConfig(
                "turn_rate_overrides must be strictly positive".into(),
            ));
        }
        if self.max_events == 0 {
            return Err(Error::InvalidConfig("max_events must be >= 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be >= 1".into()));
        }
        if self.prompt_length_dist.min_value() == 0 {
            return Err(Error::InvalidConfig(
                "prompt distribution support must be >= 1 block".into(),
            ));
        }
        Ok(())
    }

    fn turn_rate_for(&self, conversation: u32) -> f64 {
        self.turn_rate_overrides
            .iter()
            .find(|(other, _)| *other == conversation)
            .map(|(_, rate)| *rate)
            .unwrap_or(self.turn_rate)
    }

    /// Preset mirroring chat exports with synthetic timestamps: conversations
    /// born at rate 1/s, turns at rate 3/s, mean prompt length 100 blocks,
    /// mean 3.5 turns per conversation.
    ///
    /// With the first turn emitted at birth, mean turns per conversation is
    /// `1 + turn_rate / death_rate`, so the death rate is derived as
    /// `turn_rate / (3.5 - 1)`.
    pub fn sharegpt_preset(max_events: usize, seed: u64) -> Self {
        let turn_rate = 3.0;
        SyntheticParams {
            conversation_birth_rate: 1.0,
            turn_rate,
            turn_rate_overrides: Default::default(),
            death_rate: turn_rate / (PRESET_MEAN_TURNS - 1.0),
            prompt_length_dist: PromptLengthDistribution::two_point(50, 150)
                .expect("static preset"),
            response_length_dist: PromptLengthDistribution::two_point(50, 150)
                .expect("static preset"),
            max_events,
            seed,
            block_size: 1,
        }
    }

    /// Preset with mean prompt length 200 blocks, otherwise matching
    /// [`SyntheticParams::sharegpt_preset`].
    pub fn wildchat_like_preset(max_events: usize, seed: u64) -> Self {
        let mut params = Self::sharegpt_preset(max_events, seed);
        params.prompt_length_dist =
            PromptLengthDistribution::two_point(100, 300).expect("static preset");
        params.response_length_dist =
            PromptLengthDistribution::two_point(100, 300).expect("static preset");
        params
    }
}

/// One conversation's draws, all taken from its dedicated RNG stream.
fn generate_conversation(
    params: &SyntheticParams,
    index: u32,
    birth_time: f64,
) -> Vec<TurnEvent> {
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    rng.set_stream(1 + index as u64);

    let lifetime = Exp::new(params.death_rate).expect("validated rate").sample(&mut rng);
    let death_time = birth_time + lifetime;
    let turn_gap = Exp::new(params.turn_rate_for(index)).expect("validated rate");

    let mut events = Vec::new();
    // First turn coincides with birth; later turns tick while alive.
    let mut ts = birth_time;
    loop {
        events.push(TurnEvent {
            conversation_id: index,
            timestamp: ts,
            prompt_blocks: params.prompt_length_dist.sample(&mut rng),
            response_blocks: params.response_length_dist.sample(&mut rng),
            is_last_turn: false,
        });
        ts += turn_gap.sample(&mut rng);
        if ts > death_time {
            break;
        }
    }
    events
}

/// Generate a trace from the stochastic conversation model. Deterministic
/// given the seed; the same parameters always produce byte-identical traces.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<Trace> {
    params.validate()?;

    let mut birth_rng = ChaCha12Rng::seed_from_u64(params.seed);
    birth_rng.set_stream(0);
    let birth_gap = Exp::new(params.conversation_birth_rate).expect("validated rate");

    let mut events: Vec<TurnEvent> = Vec::new();
    let mut next_birth = birth_gap.sample(&mut birth_rng);
    let mut index: u32 = 0;

    // Any conversation born after `next_birth` emits only events at or beyond
    // it, so once max_events earlier events exist the horizon is covered.
    loop {
        let settled = events
            .iter()
            .filter(|e| e.timestamp <= next_birth)
            .count();
        if settled >= params.max_events {
            break;
        }
        events.extend(generate_conversation(params, index, next_birth));
        next_birth += birth_gap.sample(&mut birth_rng);
        index += 1;
    }

    events.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then(a.conversation_id.cmp(&b.conversation_id))
    });
    events.truncate(params.max_events);

    // Flag each conversation's final emitted turn.
    let mut last_index: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for (i, e) in events.iter().enumerate() {
        last_index.insert(e.conversation_id, i);
    }
    for &i in last_index.values() {
        events[i].is_last_turn = true;
    }

    let mut trace = Trace::new(events, params.block_size)?;
    trace.normalize();
    let report = validate_trace(&trace);
    debug_assert!(report.is_valid(), "generator produced invalid trace: {report}");
    Ok(trace)
}

/// Load a trace from canonical newline-delimited JSON.
///
/// Conversations are re-indexed densely by first-arrival order; an optional
/// cap on total turns is applied after sorting. The returned trace has been
/// validated.
pub fn load_conversations<R: Read>(
    source: R,
    block_size: u32,
    max_turns: Option<usize>,
) -> Result<Trace> {
    let reader = BufReader::new(source);
    let mut events = Vec::new();
    for (line_index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_index + 1,
            message: e.to_string(),
        })?;
        events.push(TurnEvent {
            conversation_id: record.conversation_id,
            timestamp: record.timestamp,
            prompt_blocks: tokens_to_blocks(record.prompt_tokens, block_size)?,
            response_blocks: tokens_to_blocks(record.response_tokens, block_size)?,
            is_last_turn: record.is_last_turn,
        });
    }

    let mut trace = Trace::new(events, block_size)?;
    trace.normalize();
    if let Some(cap) = max_turns {
        trace.events.truncate(cap);
    }
    let report = validate_trace(&trace);
    if !report.is_valid() {
        return Err(Error::InvalidTrace(report));
    }
    Ok(trace)
}

/// Convenience wrapper reading from a file path.
pub fn load_conversations_from_path<P: AsRef<Path>>(
    path: P,
    block_size: u32,
    max_turns: Option<usize>,
) -> Result<Trace> {
    let file = std::fs::File::open(path)?;
    load_conversations(file, block_size, max_turns)
}
