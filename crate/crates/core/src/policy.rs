//! Cache state and eviction policies.
//!
//! All policies share one state machine: per-conversation cached-block
//! counts with recency timestamps and "free" (infinitely old) markings.
//! Blocks within a conversation are fungible counts, not individual
//! objects — prefix reuse means only the count matters.
//!
//! On every arrival the serving cost is the job size minus whatever the
//! policy retained, then the conversation's full history enters the cache
//! (optionally trimmed right back out) and the policy resolves any
//! capacity overflow:
//!
//! - LRU evicts from the least-recently-active conversation first.
//! - Threshold-LRU admits a conversation only once its history reaches a
//!   fixed length, then behaves as LRU.
//! - Tail-optimized LRU first frees blocks above each conversation's
//!   TEL-safe budget `max(L + Q_hat - xi, 0)` (those cannot affect tail
//!   excess latency), then falls back to LRU.
//! - Expected-tail-optimized LRU evicts single blocks in ascending order of
//!   `belief_rate * P(L + Q - xi >= X)`, the probability-weighted chance
//!   that the eviction raises the next turn's excess latency.
//! - End-aware / length-aware variants consume ground-truth continuation
//!   flags and exact next-prompt lengths.
//! - Tail-optimized Belady caps every conversation at its exact TEL-safe
//!   budget and evicts furthest-in-future; with `xi = 0` it degenerates to
//!   the classical clairvoyant policy.
//!
//! A `CacheState` plus policy is a single-threaded state machine; distinct
//! simulations never share mutable state.

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ConversationId, Trace, TurnEvent};
use crate::workload::{belief_survival, PromptLengthDistribution};

/// Whether a served turn may be partially cached or must be fully cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachingMode {
    #[default]
    Optional,
    Forced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlruParams {
    /// Latency threshold in blocks (`xi = xi_s / alpha`).
    pub xi_blocks: u64,
    /// Next-prompt length estimate in blocks.
    pub q_hat_blocks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdLruParams {
    /// History length below which nothing is cached.
    #[serde(default = "default_cache_threshold")]
    pub cache_threshold_blocks: u64,
}

fn default_cache_threshold() -> u64 {
    1024
}

impl Default for ThresholdLruParams {
    fn default() -> Self {
        ThresholdLruParams {
            cache_threshold_blocks: default_cache_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtlruParams {
    pub xi_blocks: u64,
    /// Conversation death rate used for belief decay.
    pub death_rate: f64,
    /// Homogeneous nominal turn rate; per-conversation overrides win.
    #[serde(default = "default_turn_rate")]
    pub nominal_turn_rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turn_rate_overrides: Vec<(ConversationId, f64)>,
    pub prompt_dist: PromptLengthDistribution,
}

fn default_turn_rate() -> f64 {
    1.0
}

impl EtlruParams {
    fn rate_for(&self, id: ConversationId) -> f64 {
        self.turn_rate_overrides
            .iter()
            .find(|(other, _)| *other == id)
            .map(|(_, rate)| *rate)
            .unwrap_or(self.nominal_turn_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthAwareParams {
    pub xi_blocks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBeladyParams {
    pub xi_blocks: u64,
}

/// Policy family selection with family-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PolicyFamily {
    Lru,
    ThresholdLru(ThresholdLruParams),
    Tlru(TlruParams),
    Etlru(EtlruParams),
    EndAwareTlru(TlruParams),
    LengthAwareTlru(LengthAwareParams),
    TailBelady(TailBeladyParams),
}

/// A policy family plus the caching mode it runs under. Serializes to flat
/// JSON and round-trips losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    #[serde(flatten)]
    pub family: PolicyFamily,
    #[serde(default)]
    pub caching_mode: CachingMode,
}

impl PolicyConfig {
    pub fn new(family: PolicyFamily) -> Self {
        PolicyConfig {
            family,
            caching_mode: CachingMode::Optional,
        }
    }

    pub fn forced(mut self) -> Self {
        self.caching_mode = CachingMode::Forced;
        self
    }

    /// Stable short name for report keys.
    pub fn label(&self) -> String {
        let base = match &self.family {
            PolicyFamily::Lru => "lru",
            PolicyFamily::ThresholdLru(_) => "threshold_lru",
            PolicyFamily::Tlru(_) => "tlru",
            PolicyFamily::Etlru(_) => "etlru",
            PolicyFamily::EndAwareTlru(_) => "end_aware_tlru",
            PolicyFamily::LengthAwareTlru(_) => "length_aware_tlru",
            PolicyFamily::TailBelady(_) => "tail_belady",
        };
        match self.caching_mode {
            CachingMode::Optional => base.to_string(),
            CachingMode::Forced => format!("{base}[forced]"),
        }
    }

    /// The policy's latency threshold in blocks, for families that have one.
    pub fn xi_blocks(&self) -> Option<u64> {
        match &self.family {
            PolicyFamily::Lru | PolicyFamily::ThresholdLru(_) => None,
            PolicyFamily::Tlru(p) | PolicyFamily::EndAwareTlru(p) => Some(p.xi_blocks),
            PolicyFamily::Etlru(p) => Some(p.xi_blocks),
            PolicyFamily::LengthAwareTlru(p) => Some(p.xi_blocks),
            PolicyFamily::TailBelady(p) => Some(p.xi_blocks),
        }
    }

    /// Replace the latency threshold on families that carry one.
    pub fn with_xi_blocks(mut self, xi_blocks: u64) -> Self {
        match &mut self.family {
            PolicyFamily::Lru | PolicyFamily::ThresholdLru(_) => {}
            PolicyFamily::Tlru(p) | PolicyFamily::EndAwareTlru(p) => p.xi_blocks = xi_blocks,
            PolicyFamily::Etlru(p) => p.xi_blocks = xi_blocks,
            PolicyFamily::LengthAwareTlru(p) => p.xi_blocks = xi_blocks,
            PolicyFamily::TailBelady(p) => p.xi_blocks = xi_blocks,
        }
        self
    }

    /// Whether replay must precompute the future-arrival map.
    pub fn needs_clairvoyance(&self) -> bool {
        matches!(
            self.family,
            PolicyFamily::LengthAwareTlru(_) | PolicyFamily::TailBelady(_)
        )
    }

    /// Whether the policy consumes ground-truth continuation flags.
    pub fn needs_last_turn_flags(&self) -> bool {
        matches!(
            self.family,
            PolicyFamily::EndAwareTlru(_) | PolicyFamily::LengthAwareTlru(_)
        )
    }
}

/// Per-conversation cache bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConvEntry {
    /// Cached blocks, `X_i`. Never exceeds `history_blocks`.
    pub cached_blocks: u64,
    /// Total conversation history in blocks, `L_i`.
    pub history_blocks: u64,
    /// Timestamp of the conversation's last turn.
    pub last_turn_timestamp: f64,
    /// Blocks flagged "infinitely old": evicted before anything else.
    pub free_marked_blocks: u64,
    pub turn_count: u64,
    /// Ground-truth termination, recorded when the last turn is served.
    pub terminated: bool,
}

/// Cache state shared by all policies.
#[derive(Debug, Clone, Default)]
pub struct CacheState {
    capacity: u64,
    entries: Vec<ConvEntry>,
    total_cached: u64,
}

impl CacheState {
    pub fn new(capacity: u64) -> Self {
        CacheState {
            capacity,
            entries: Vec::new(),
            total_cached: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn total_cached(&self) -> u64 {
        self.total_cached
    }

    pub fn entry(&self, id: ConversationId) -> Option<&ConvEntry> {
        self.entries.get(id as usize)
    }

    pub fn cached_blocks(&self, id: ConversationId) -> u64 {
        self.entry(id).map_or(0, |e| e.cached_blocks)
    }

    pub fn history_blocks(&self, id: ConversationId) -> u64 {
        self.entry(id).map_or(0, |e| e.history_blocks)
    }

    /// All conversations seen so far, in id order.
    pub fn conversations(&self) -> impl Iterator<Item = (ConversationId, &ConvEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i as ConversationId, e))
    }

    fn entry_mut(&mut self, id: ConversationId) -> &mut ConvEntry {
        let index = id as usize;
        if index >= self.entries.len() {
            self.entries.resize(index + 1, ConvEntry::default());
        }
        &mut self.entries[index]
    }

    /// Seed a conversation directly; for tests and micro-instances.
    pub fn seed_conversation(
        &mut self,
        id: ConversationId,
        history_blocks: u64,
        cached_blocks: u64,
        last_turn_timestamp: f64,
    ) {
        assert!(cached_blocks <= history_blocks);
        let old = self.cached_blocks(id);
        let entry = self.entry_mut(id);
        entry.history_blocks = history_blocks;
        entry.cached_blocks = cached_blocks;
        entry.last_turn_timestamp = last_turn_timestamp;
        self.total_cached = self.total_cached - old + cached_blocks;
    }

    fn set_cached(&mut self, id: ConversationId, blocks: u64) {
        let entry = self.entry_mut(id);
        debug_assert!(blocks <= entry.history_blocks);
        let old = entry.cached_blocks;
        entry.cached_blocks = blocks;
        entry.free_marked_blocks = entry.free_marked_blocks.min(blocks);
        self.total_cached = self.total_cached - old + blocks;
    }

    /// Flag blocks of a conversation as free ("infinitely old").
    pub fn mark_free(&mut self, id: ConversationId, blocks: u64) {
        let entry = self.entry_mut(id);
        entry.free_marked_blocks = blocks.min(entry.cached_blocks);
    }

    fn evict_blocks(&mut self, id: ConversationId, blocks: u64, from_free: bool) {
        let entry = self.entry_mut(id);
        debug_assert!(blocks <= entry.cached_blocks);
        entry.cached_blocks -= blocks;
        if from_free {
            debug_assert!(blocks <= entry.free_marked_blocks);
            entry.free_marked_blocks -= blocks;
        }
        entry.free_marked_blocks = entry.free_marked_blocks.min(entry.cached_blocks);
        self.total_cached -= blocks;
    }

    /// Amount by which the cache currently exceeds capacity.
    pub fn overflow(&self) -> u64 {
        self.total_cached.saturating_sub(self.capacity)
    }

    /// Panic if any structural invariant is violated. Test support.
    pub fn assert_invariants(&self) {
        let mut total = 0;
        for (id, e) in self.conversations() {
            assert!(
                e.cached_blocks <= e.history_blocks,
                "conversation {id}: cached {} > history {}",
                e.cached_blocks,
                e.history_blocks
            );
            assert!(
                e.free_marked_blocks <= e.cached_blocks,
                "conversation {id}: free {} > cached {}",
                e.free_marked_blocks,
                e.cached_blocks
            );
            total += e.cached_blocks;
        }
        assert_eq!(total, self.total_cached);
        assert!(
            self.total_cached <= self.capacity,
            "total cached {} exceeds capacity {}",
            self.total_cached,
            self.capacity
        );
    }

    /// Conversations holding cache, oldest last-turn first, ties by id.
    /// `protected` is excluded.
    fn recency_order(&self, protected: Option<ConversationId>) -> Vec<ConversationId> {
        let mut ids: Vec<ConversationId> = self
            .conversations()
            .filter(|(id, e)| e.cached_blocks > 0 && Some(*id) != protected)
            .map(|(id, _)| id)
            .collect();
        ids.sort_by(|a, b| {
            let ta = self.entries[*a as usize].last_turn_timestamp;
            let tb = self.entries[*b as usize].last_turn_timestamp;
            ta.total_cmp(&tb).then(a.cmp(b))
        });
        ids
    }
}

/// Where in a policy's decision procedure an eviction happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPhase {
    TelSafeTrim,
    LruFallback,
    Belady,
    Ranked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eviction {
    pub conversation_id: ConversationId,
    pub blocks: u64,
    pub phase: EvictionPhase,
}

/// The evictions one overflow resolution performed, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionDecision {
    pub evictions: Vec<Eviction>,
}

impl EvictionDecision {
    fn record(&mut self, id: ConversationId, blocks: u64, phase: EvictionPhase) {
        if blocks == 0 {
            return;
        }
        if let Some(last) = self.evictions.last_mut() {
            if last.conversation_id == id && last.phase == phase {
                last.blocks += blocks;
                return;
            }
        }
        self.evictions.push(Eviction {
            conversation_id: id,
            blocks,
            phase,
        });
    }

    pub fn total_evicted(&self) -> u64 {
        self.evictions.iter().map(|e| e.blocks).sum()
    }

    /// One entry per evicted block, in eviction order. Phase tags are
    /// dropped so differently-tagged but identical sequences compare equal.
    pub fn block_sequence(&self) -> Vec<ConversationId> {
        let mut seq = Vec::with_capacity(self.total_evicted() as usize);
        for e in &self.evictions {
            seq.extend(std::iter::repeat_n(e.conversation_id, e.blocks as usize));
        }
        seq
    }
}

/// Evict `overflow` blocks by recency. Free-marked blocks count as
/// infinitely old and go first (oldest conversation first); after that the
/// conversation with the minimum last-turn time is drained, ties broken by
/// lower conversation id.
pub fn lru_evict(
    state: &mut CacheState,
    overflow: u64,
    protected: Option<ConversationId>,
) -> EvictionDecision {
    let mut decision = EvictionDecision::default();
    let mut remaining = overflow;

    // Free-marked blocks first.
    for id in state.recency_order(protected) {
        if remaining == 0 {
            return decision;
        }
        let free = state.entries[id as usize].free_marked_blocks;
        let take = free.min(remaining);
        if take > 0 {
            state.evict_blocks(id, take, true);
            decision.record(id, take, EvictionPhase::LruFallback);
            remaining -= take;
        }
    }

    // Then plain recency order.
    for id in state.recency_order(protected) {
        if remaining == 0 {
            break;
        }
        let take = state.entries[id as usize].cached_blocks.min(remaining);
        if take > 0 {
            state.evict_blocks(id, take, false);
            decision.record(id, take, EvictionPhase::LruFallback);
            remaining -= take;
        }
    }
    decision
}

/// Two-phase tail-optimized trim against per-conversation TEL-safe budgets.
///
/// Phase 1 marks every cached block above a conversation's budget as free
/// and evicts free blocks, oldest conversation first, until capacity fits
/// or free blocks run out. Phase 2 delegates any remaining overflow to
/// [`lru_evict`].
fn trim_to_budgets(
    state: &mut CacheState,
    budget: impl Fn(ConversationId, &ConvEntry) -> u64,
    protected: Option<ConversationId>,
) -> EvictionDecision {
    let ids: Vec<ConversationId> = state
        .conversations()
        .filter(|(id, e)| e.cached_blocks > 0 && Some(*id) != protected)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let entry = &state.entries[id as usize];
        let surplus = entry.cached_blocks.saturating_sub(budget(id, entry));
        state.mark_free(id, surplus);
    }

    let mut decision = EvictionDecision::default();
    for id in state.recency_order(protected) {
        if state.overflow() == 0 {
            return decision;
        }
        let free = state.entries[id as usize].free_marked_blocks;
        let take = free.min(state.overflow());
        if take > 0 {
            state.evict_blocks(id, take, true);
            decision.record(id, take, EvictionPhase::TelSafeTrim);
        }
    }

    let remaining = state.overflow();
    if remaining > 0 {
        let fallback = lru_evict(state, remaining, protected);
        decision.evictions.extend(fallback.evictions);
    }
    decision
}

/// Tail-optimized LRU eviction: free-trim above `max(L + Q_hat - xi, 0)`,
/// then LRU.
pub fn tlru_trim(
    state: &mut CacheState,
    params: &TlruParams,
    protected: Option<ConversationId>,
) -> EvictionDecision {
    let TlruParams {
        xi_blocks,
        q_hat_blocks,
    } = *params;
    trim_to_budgets(
        state,
        move |_, e| (e.history_blocks + q_hat_blocks).saturating_sub(xi_blocks),
        protected,
    )
}

/// Ranking score for one conversation under expected-tail-optimized LRU:
/// belief turn rate times the probability that losing one more block raises
/// the next turn's excess latency.
fn etlru_score(id: ConversationId, entry: &ConvEntry, now: f64, params: &EtlruParams) -> f64 {
    let elapsed = (now - entry.last_turn_timestamp).max(0.0);
    let belief = belief_survival(params.death_rate, elapsed)
        .expect("validated death_rate and non-negative elapsed");
    // P(L + Q - xi >= X) = P(Q >= X - L + xi).
    let threshold =
        entry.cached_blocks as i64 - entry.history_blocks as i64 + params.xi_blocks as i64;
    params.rate_for(id) * belief * params.prompt_dist.survival(threshold)
}

/// Conversations with cached blocks ranked ascending by eviction score, ties
/// broken by (older last turn, lower id).
pub fn etlru_rank(
    state: &CacheState,
    now: f64,
    params: &EtlruParams,
) -> Vec<(ConversationId, f64)> {
    let mut scored: Vec<(ConversationId, f64)> = state
        .conversations()
        .filter(|(_, e)| e.cached_blocks > 0)
        .map(|(id, e)| (id, etlru_score(id, e, now, params)))
        .collect();
    scored.sort_by(|(ida, a), (idb, b)| {
        a.total_cmp(b)
            .then_with(|| {
                let ta = state.entries[*ida as usize].last_turn_timestamp;
                let tb = state.entries[*idb as usize].last_turn_timestamp;
                ta.total_cmp(&tb)
            })
            .then(ida.cmp(idb))
    });
    scored
}

/// Min-heap entry ordered by (score, last turn time, id); `BinaryHeap` pops
/// the smallest because the comparison is reversed.
struct RankEntry {
    score: f64,
    tau: f64,
    id: ConversationId,
    cached_at_score: u64,
}

impl PartialEq for RankEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for RankEntry {}
impl PartialOrd for RankEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for RankEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(other.tau.total_cmp(&self.tau))
            .then(other.id.cmp(&self.id))
    }
}

/// Greedy expected-tail-optimized eviction: exactly `overflow` single-block
/// evictions by repeated minimum-score selection, rescoring the affected
/// conversation after each removal.
pub fn etlru_evict(
    state: &mut CacheState,
    now: f64,
    overflow: u64,
    params: &EtlruParams,
    protected: Option<ConversationId>,
) -> EvictionDecision {
    let mut heap: BinaryHeap<RankEntry> = state
        .conversations()
        .filter(|(id, e)| e.cached_blocks > 0 && Some(*id) != protected)
        .map(|(id, e)| RankEntry {
            score: etlru_score(id, e, now, params),
            tau: e.last_turn_timestamp,
            id,
            cached_at_score: e.cached_blocks,
        })
        .collect();

    let mut decision = EvictionDecision::default();
    let mut remaining = overflow;
    while remaining > 0 {
        let top = heap.pop().expect("eviction demand exceeds evictable blocks");
        let entry = state.entries[top.id as usize];
        if entry.cached_blocks != top.cached_at_score || entry.cached_blocks == 0 {
            continue; // stale score from before this conversation shrank
        }
        state.evict_blocks(top.id, 1, false);
        decision.record(top.id, 1, EvictionPhase::Ranked);
        remaining -= 1;

        let entry = state.entries[top.id as usize];
        if entry.cached_blocks > 0 {
            heap.push(RankEntry {
                score: etlru_score(top.id, &entry, now, params),
                tau: entry.last_turn_timestamp,
                id: top.id,
                cached_at_score: entry.cached_blocks,
            });
        }
    }
    decision
}

/// What a clairvoyant policy knows about one conversation's future.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NextArrival {
    At { time: f64, prompt_blocks: u64 },
    Never,
}

/// True next-arrival map, derived from the trace in a single pre-pass and
/// advanced as events are served. Only clairvoyant replays receive it.
#[derive(Debug, Clone)]
pub struct Clairvoyance {
    pending: Vec<std::collections::VecDeque<(f64, u64)>>,
}

impl Clairvoyance {
    pub fn from_trace(trace: &Trace) -> Self {
        let mut pending: Vec<std::collections::VecDeque<(f64, u64)>> = Vec::new();
        for event in &trace.events {
            let index = event.conversation_id as usize;
            if index >= pending.len() {
                pending.resize_with(index + 1, Default::default);
            }
            pending[index].push_back((event.timestamp, event.prompt_blocks));
        }
        Clairvoyance { pending }
    }

    /// The conversation's next arrival, `Never` once it has no more turns.
    pub fn next(&self, id: ConversationId) -> Result<NextArrival> {
        let queue = self
            .pending
            .get(id as usize)
            .ok_or_else(|| Error::Clairvoyance(format!("no future entry for conversation {id}")))?;
        Ok(match queue.front() {
            Some(&(time, prompt_blocks)) => NextArrival::At {
                time,
                prompt_blocks,
            },
            None => NextArrival::Never,
        })
    }

    /// Consume the just-served turn so `next` points past it.
    pub fn advance_past(&mut self, id: ConversationId) {
        if let Some(queue) = self.pending.get_mut(id as usize) {
            queue.pop_front();
        }
    }
}

/// Clairvoyant tail-optimized eviction.
///
/// Phase 1 caps every conversation at its exact TEL-safe budget
/// `max(L + q_next - xi, 0)` computed from the true next prompt length;
/// conversations that never return have budget 0. Phase 2 evicts any
/// remaining overflow from the conversation whose next arrival is furthest
/// in the future, ties by conversation id.
pub fn belady_evict(
    state: &mut CacheState,
    future: &Clairvoyance,
    params: &TailBeladyParams,
    protected: Option<ConversationId>,
) -> Result<EvictionDecision> {
    let mut decision = EvictionDecision::default();

    let ids: Vec<ConversationId> = state
        .conversations()
        .filter(|(id, e)| e.cached_blocks > 0 && Some(*id) != protected)
        .map(|(id, _)| id)
        .collect();
    for id in &ids {
        let budget = match future.next(*id)? {
            NextArrival::At { prompt_blocks, .. } => {
                (state.entries[*id as usize].history_blocks + prompt_blocks)
                    .saturating_sub(params.xi_blocks)
            }
            NextArrival::Never => 0,
        };
        let surplus = state.entries[*id as usize].cached_blocks.saturating_sub(budget);
        if surplus > 0 {
            state.evict_blocks(*id, surplus, false);
            decision.record(*id, surplus, EvictionPhase::TelSafeTrim);
        }
    }

    if state.overflow() > 0 {
        // Furthest next arrival first; Never sorts before any finite time.
        let mut order: Vec<(ConversationId, Option<f64>)> = Vec::new();
        for (id, e) in state.conversations() {
            if e.cached_blocks == 0 || Some(id) == protected {
                continue;
            }
            let time = match future.next(id)? {
                NextArrival::At { time, .. } => Some(time),
                NextArrival::Never => None,
            };
            order.push((id, time));
        }
        order.sort_by(|(ida, a), (idb, b)| {
            let fa = a.unwrap_or(f64::INFINITY);
            let fb = b.unwrap_or(f64::INFINITY);
            fb.total_cmp(&fa).then(ida.cmp(idb))
        });
        for (id, _) in order {
            let remaining = state.overflow();
            if remaining == 0 {
                break;
            }
            let take = state.entries[id as usize].cached_blocks.min(remaining);
            state.evict_blocks(id, take, false);
            decision.record(id, take, EvictionPhase::Belady);
        }
    }
    Ok(decision)
}

/// Post-serve adjustment for the end-aware and length-aware variants: a
/// terminating conversation's cache is dropped entirely.
pub fn variant_adjust(
    state: &mut CacheState,
    event: &TurnEvent,
    config: &PolicyConfig,
) -> Result<()> {
    if !config.needs_last_turn_flags() {
        return Err(Error::InvalidConfig(
            "variant_adjust applies only to end-aware or length-aware policies".into(),
        ));
    }
    if event.is_last_turn && config.caching_mode == CachingMode::Optional {
        state.set_cached(event.conversation_id, 0);
    }
    Ok(())
}

/// Everything a served turn reports back to the replay engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ServedRecord {
    pub conversation_id: ConversationId,
    pub timestamp: f64,
    /// Blocks the request had to compute: history plus prompt minus
    /// whatever the policy retained.
    pub uncached_blocks: u64,
    pub cached_blocks_used: u64,
    pub job_size: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalOutcome {
    pub record: ServedRecord,
    pub eviction: Option<EvictionDecision>,
}

/// Process one arriving turn: serve it against the current cache, fold the
/// turn into the conversation history, apply the policy's caching choice,
/// and resolve any capacity overflow.
///
/// In optional mode the full new history enters the cache before trimming;
/// in forced mode it is pinned there and eviction may only touch other
/// conversations. Forced mode errors when a history alone exceeds capacity.
pub fn apply_arrival(
    state: &mut CacheState,
    event: &TurnEvent,
    config: &PolicyConfig,
    future: Option<&Clairvoyance>,
) -> Result<ArrivalOutcome> {
    let id = event.conversation_id;
    let pre_cached = state.cached_blocks(id);
    let job_size = state.history_blocks(id) + event.prompt_blocks;
    let record = ServedRecord {
        conversation_id: id,
        timestamp: event.timestamp,
        uncached_blocks: job_size - pre_cached,
        cached_blocks_used: pre_cached,
        job_size,
    };

    {
        let entry = state.entry_mut(id);
        entry.history_blocks += event.prompt_blocks + event.response_blocks;
        entry.last_turn_timestamp = event.timestamp;
        entry.turn_count += 1;
        entry.free_marked_blocks = 0;
        entry.terminated = event.is_last_turn;
    }
    let history = state.history_blocks(id);

    let protected = match config.caching_mode {
        CachingMode::Forced => {
            if history > state.capacity {
                return Err(Error::CapacityInfeasible {
                    conversation_id: id,
                    history_blocks: history,
                    capacity: state.capacity,
                });
            }
            state.set_cached(id, history);
            Some(id)
        }
        CachingMode::Optional => {
            let cached = match &config.family {
                PolicyFamily::ThresholdLru(p) => {
                    if history >= p.cache_threshold_blocks {
                        history
                    } else {
                        0
                    }
                }
                _ => history,
            };
            state.set_cached(id, cached);
            if config.needs_last_turn_flags() {
                variant_adjust(state, event, config)?;
            }
            None
        }
    };

    let overflow = state.overflow();
    let eviction = if overflow == 0 {
        None
    } else {
        Some(match &config.family {
            PolicyFamily::Lru | PolicyFamily::ThresholdLru(_) => {
                lru_evict(state, overflow, protected)
            }
            PolicyFamily::Tlru(p) => tlru_trim(state, p, protected),
            PolicyFamily::EndAwareTlru(p) => {
                let TlruParams {
                    xi_blocks,
                    q_hat_blocks,
                } = *p;
                trim_to_budgets(
                    state,
                    move |_, e| {
                        if e.terminated {
                            0
                        } else {
                            (e.history_blocks + q_hat_blocks).saturating_sub(xi_blocks)
                        }
                    },
                    protected,
                )
            }
            PolicyFamily::LengthAwareTlru(p) => {
                let future = future.ok_or_else(|| {
                    Error::Clairvoyance("length-aware replay needs the future-arrival map".into())
                })?;
                let xi = p.xi_blocks;
                let mut budgets: Vec<u64> = Vec::with_capacity(state.entries.len());
                for (cid, e) in state.conversations() {
                    let budget = if e.terminated {
                        0
                    } else {
                        match future.next(cid)? {
                            NextArrival::At { prompt_blocks, .. } => {
                                (e.history_blocks + prompt_blocks).saturating_sub(xi)
                            }
                            NextArrival::Never => 0,
                        }
                    };
                    budgets.push(budget);
                }
                trim_to_budgets(state, move |cid, _| budgets[cid as usize], protected)
            }
            PolicyFamily::Etlru(p) => etlru_evict(state, event.timestamp, overflow, p, protected),
            PolicyFamily::TailBelady(p) => {
                let future = future.ok_or_else(|| {
                    Error::Clairvoyance("clairvoyant replay needs the future-arrival map".into())
                })?;
                belady_evict(state, future, p, protected)?
            }
        })
    };

    debug_assert!(state.total_cached <= state.capacity);
    Ok(ArrivalOutcome { record, eviction })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(id: ConversationId, ts: f64, q: u64, a: u64, last: bool) -> TurnEvent {
        TurnEvent {
            conversation_id: id,
            timestamp: ts,
            prompt_blocks: q,
            response_blocks: a,
            is_last_turn: last,
        }
    }

    fn lru_config() -> PolicyConfig {
        PolicyConfig::new(PolicyFamily::Lru)
    }

    fn tlru_config(xi: u64, q_hat: u64) -> PolicyConfig {
        PolicyConfig::new(PolicyFamily::Tlru(TlruParams {
            xi_blocks: xi,
            q_hat_blocks: q_hat,
        }))
    }

    #[test]
    fn first_turn_on_empty_cache() {
        let mut state = CacheState::new(100);
        let outcome =
            apply_arrival(&mut state, &turn(0, 1.0, 10, 0, false), &lru_config(), None).unwrap();
        assert_eq!(outcome.record.uncached_blocks, 10);
        assert_eq!(outcome.record.cached_blocks_used, 0);
        assert_eq!(state.cached_blocks(0), 10);
        assert!(outcome.eviction.is_none());
        state.assert_invariants();
    }

    #[test]
    fn conversation_race_under_lru_hits_200_uncached() {
        let mut state = CacheState::new(100);
        let config = lru_config();
        apply_arrival(&mut state, &turn(0, 1.0, 100, 0, false), &config, None).unwrap();
        apply_arrival(&mut state, &turn(1, 2.0, 100, 0, true), &config, None).unwrap();
        // LRU evicted all of conversation 0 to admit conversation 1.
        assert_eq!(state.cached_blocks(0), 0);
        let outcome =
            apply_arrival(&mut state, &turn(0, 3.0, 100, 0, true), &config, None).unwrap();
        assert_eq!(outcome.record.uncached_blocks, 200);
        state.assert_invariants();
    }

    #[test]
    fn conversation_race_under_tlru_trims_both_to_50() {
        let mut state = CacheState::new(100);
        let config = tlru_config(150, 100);
        apply_arrival(&mut state, &turn(0, 1.0, 100, 0, false), &config, None).unwrap();
        apply_arrival(&mut state, &turn(1, 2.0, 100, 0, true), &config, None).unwrap();
        assert_eq!(state.cached_blocks(0), 50);
        assert_eq!(state.cached_blocks(1), 50);
        let outcome =
            apply_arrival(&mut state, &turn(0, 3.0, 100, 0, true), &config, None).unwrap();
        assert_eq!(outcome.record.uncached_blocks, 150);
    }

    #[test]
    fn forced_mode_rejects_oversized_history() {
        let mut state = CacheState::new(5);
        let config = lru_config().forced();
        // history + prompt + response = 7 > 5
        apply_arrival(&mut state, &turn(0, 1.0, 3, 1, false), &config, None).unwrap();
        let err = apply_arrival(&mut state, &turn(0, 2.0, 2, 1, false), &config, None);
        assert!(matches!(err, Err(Error::CapacityInfeasible { .. })));
    }

    #[test]
    fn forced_mode_pins_arriving_conversation() {
        let mut state = CacheState::new(10);
        let config = lru_config().forced();
        apply_arrival(&mut state, &turn(0, 1.0, 6, 0, false), &config, None).unwrap();
        apply_arrival(&mut state, &turn(1, 2.0, 8, 0, false), &config, None).unwrap();
        // Arriving conversation keeps its full history; the other one pays.
        assert_eq!(state.cached_blocks(1), 8);
        assert_eq!(state.cached_blocks(0), 2);
        state.assert_invariants();
    }

    #[test]
    fn lru_evicts_in_recency_order() {
        let mut state = CacheState::new(10);
        state.seed_conversation(0, 3, 3, 1.0);
        state.seed_conversation(1, 3, 3, 2.0);
        let decision = lru_evict(&mut state, 4, None);
        assert_eq!(
            decision.evictions,
            vec![
                Eviction {
                    conversation_id: 0,
                    blocks: 3,
                    phase: EvictionPhase::LruFallback
                },
                Eviction {
                    conversation_id: 1,
                    blocks: 1,
                    phase: EvictionPhase::LruFallback
                },
            ]
        );
    }

    #[test]
    fn lru_takes_free_marked_blocks_first() {
        let mut state = CacheState::new(10);
        state.seed_conversation(0, 3, 3, 1.0);
        state.seed_conversation(1, 3, 3, 9.0);
        state.mark_free(1, 1);
        let decision = lru_evict(&mut state, 1, None);
        // The free block on the most recent conversation goes, not the
        // oldest conversation's blocks.
        assert_eq!(decision.evictions[0].conversation_id, 1);
        assert_eq!(state.cached_blocks(0), 3);
        assert_eq!(state.cached_blocks(1), 2);
    }

    #[test]
    fn lru_ties_break_by_lower_id() {
        let mut state = CacheState::new(10);
        state.seed_conversation(0, 2, 2, 1.0);
        state.seed_conversation(1, 2, 2, 1.0);
        let decision = lru_evict(&mut state, 1, None);
        assert_eq!(decision.evictions[0].conversation_id, 0);
    }

    #[test]
    fn tlru_with_zero_params_matches_lru() {
        // Budget = history, nothing is ever free, so phase 2 does all work.
        let mut a = CacheState::new(10);
        let mut b = CacheState::new(10);
        for s in [&mut a, &mut b] {
            s.seed_conversation(0, 5, 5, 1.0);
            s.seed_conversation(1, 4, 4, 2.0);
            s.seed_conversation(2, 4, 4, 3.0);
        }
        let trim = tlru_trim(
            &mut a,
            &TlruParams {
                xi_blocks: 0,
                q_hat_blocks: 0,
            },
            None,
        );
        let plain = lru_evict(&mut b, 3, None);
        assert_eq!(trim.block_sequence(), plain.block_sequence());
    }

    #[test]
    fn tlru_budget_zero_frees_whole_conversation() {
        // Projected next load below the threshold: no caching needed at all.
        let mut state = CacheState::new(5);
        state.seed_conversation(0, 4, 4, 1.0);
        state.seed_conversation(1, 6, 6, 2.0);
        let decision = tlru_trim(
            &mut state,
            &TlruParams {
                xi_blocks: 20,
                q_hat_blocks: 3,
            },
            None,
        );
        // 4 + 3 < 20 and 6 + 3 < 20: everything is free; trim stops at
        // capacity after draining the oldest conversation first.
        assert_eq!(decision.evictions[0].conversation_id, 0);
        assert_eq!(decision.evictions[0].blocks, 4);
        assert_eq!(decision.evictions[0].phase, EvictionPhase::TelSafeTrim);
        assert_eq!(state.total_cached(), 5);
    }

    #[test]
    fn etlru_rank_degenerate_distribution() {
        let params = EtlruParams {
            xi_blocks: 150,
            death_rate: 1.0,
            nominal_turn_rate: 2.0,
            turn_rate_overrides: Default::default(),
            prompt_dist: PromptLengthDistribution::deterministic(100),
        };
        let mut state = CacheState::new(1000);
        state.seed_conversation(0, 100, 50, 0.0);
        let ranked = etlru_rank(&state, 0.0, &params);
        // 1{100 + 100 - 150 >= 50} = 1, score = rate.
        assert_eq!(ranked, vec![(0, 2.0)]);

        state.seed_conversation(0, 100, 51, 0.0);
        let ranked = etlru_rank(&state, 0.0, &params);
        // 1{50 >= 51} = 0: the block is free.
        assert_eq!(ranked, vec![(0, 0.0)]);
    }

    #[test]
    fn etlru_rank_two_point_distribution() {
        let params = EtlruParams {
            xi_blocks: 150,
            death_rate: 1.0,
            nominal_turn_rate: 1.0,
            turn_rate_overrides: Default::default(),
            prompt_dist: PromptLengthDistribution::two_point(50, 150).unwrap(),
        };
        let mut state = CacheState::new(1000);
        state.seed_conversation(0, 100, 60, 0.0);
        let ranked = etlru_rank(&state, 0.0, &params);
        // P(Q >= 60 - 100 + 150) = P(Q >= 110) = 0.5.
        assert_eq!(ranked, vec![(0, 0.5)]);
    }

    #[test]
    fn etlru_drains_free_conversation_first() {
        let params = EtlruParams {
            xi_blocks: 10,
            death_rate: 1.0,
            nominal_turn_rate: 1.0,
            turn_rate_overrides: Default::default(),
            prompt_dist: PromptLengthDistribution::deterministic(5),
        };
        let mut state = CacheState::new(100);
        // Conversation 0: X = 20 > budget 20+5-10, so 5 blocks score zero.
        state.seed_conversation(0, 20, 20, 5.0);
        // Conversation 1: X = 4 <= budget 10+5-10 = 5, scores positive.
        state.seed_conversation(1, 10, 4, 1.0);
        let decision = etlru_evict(&mut state, 5.0, 5, &params, None);
        assert_eq!(decision.evictions.len(), 1);
        assert_eq!(decision.evictions[0].conversation_id, 0);
        assert_eq!(decision.evictions[0].blocks, 5);
        assert_eq!(state.cached_blocks(0), 15);
        assert_eq!(state.cached_blocks(1), 4);
    }

    #[test]
    fn etlru_reduces_to_lru_at_zero_threshold() {
        let params = EtlruParams {
            xi_blocks: 0,
            death_rate: 0.5,
            nominal_turn_rate: 1.0,
            turn_rate_overrides: Default::default(),
            prompt_dist: PromptLengthDistribution::deterministic(4),
        };
        let mut ranked_state = CacheState::new(20);
        let mut lru_state = CacheState::new(20);
        for s in [&mut ranked_state, &mut lru_state] {
            s.seed_conversation(0, 6, 6, 3.0);
            s.seed_conversation(1, 6, 6, 1.0);
            s.seed_conversation(2, 6, 6, 2.0);
        }
        let ranked = etlru_evict(&mut ranked_state, 4.0, 7, &params, None);
        let plain = lru_evict(&mut lru_state, 7, None);
        assert_eq!(ranked.block_sequence(), plain.block_sequence());
    }

    #[test]
    fn etlru_prefers_least_likely_to_return() {
        // Heterogeneous belief rates: eviction follows ascending
        // rate * exp(-mu * silence), generalizing recency.
        let params = EtlruParams {
            xi_blocks: 0,
            death_rate: 1.0,
            nominal_turn_rate: 1.0,
            turn_rate_overrides: [(0u32, 5.0), (1u32, 1.0)].into_iter().collect(),
            prompt_dist: PromptLengthDistribution::deterministic(2),
        };
        let mut state = CacheState::new(10);
        // Conversation 0 is older but has a much higher nominal rate.
        state.seed_conversation(0, 4, 4, 1.0);
        state.seed_conversation(1, 4, 4, 2.0);
        // At t = 3: score0 = 5 e^{-2} = 0.68, score1 = 1 e^{-1} = 0.37.
        let decision = etlru_evict(&mut state, 3.0, 4, &params, None);
        assert_eq!(decision.evictions[0].conversation_id, 1);
        assert_eq!(decision.evictions[0].blocks, 4);
    }

    #[test]
    fn belady_orders_by_furthest_next_arrival() {
        let trace = Trace::new(
            vec![
                turn(0, 1.0, 1, 0, false),
                turn(1, 2.0, 1, 0, false),
                turn(2, 2.5, 1, 0, true),
                turn(1, 3.0, 1, 0, true),
                turn(0, 5.0, 1, 0, true),
            ],
            1,
        )
        .unwrap();
        let mut future = Clairvoyance::from_trace(&trace);
        // Pretend the first three turns were served.
        future.advance_past(0);
        future.advance_past(1);
        future.advance_past(2);

        let mut state = CacheState::new(0);
        state.seed_conversation(0, 3, 3, 1.0);
        state.seed_conversation(1, 3, 3, 2.0);
        state.seed_conversation(2, 3, 3, 2.5);
        // At xi=100 every budget is zero and phase 1 caps everything.
        let params = TailBeladyParams { xi_blocks: 100 };
        let decision = belady_evict(&mut state, &future, &params, None).unwrap();
        assert_eq!(decision.total_evicted(), 9);

        let mut state = CacheState::new(0);
        state.seed_conversation(0, 30, 3, 1.0);
        state.seed_conversation(1, 30, 3, 2.0);
        state.seed_conversation(2, 30, 3, 2.5);
        let params = TailBeladyParams { xi_blocks: 0 };
        let decision = belady_evict(&mut state, &future, &params, None).unwrap();
        // Never-returning conversation 2 goes first, then furthest (0 at
        // t=5), then 1 (t=3).
        let order: Vec<_> = decision
            .evictions
            .iter()
            .map(|e| e.conversation_id)
            .collect();
        assert_eq!(order, vec![2, 0, 1]);
    }

    #[test]
    fn belady_missing_future_entry_is_an_error() {
        let trace = Trace::new(vec![turn(0, 1.0, 1, 0, true)], 1).unwrap();
        let future = Clairvoyance::from_trace(&trace);
        let mut state = CacheState::new(0);
        state.seed_conversation(3, 2, 2, 1.0);
        let params = TailBeladyParams { xi_blocks: 0 };
        assert!(matches!(
            belady_evict(&mut state, &future, &params, None),
            Err(Error::Clairvoyance(_))
        ));
    }

    #[test]
    fn end_aware_drops_terminating_conversation() {
        let mut state = CacheState::new(100);
        let config = PolicyConfig::new(PolicyFamily::EndAwareTlru(TlruParams {
            xi_blocks: 0,
            q_hat_blocks: 0,
        }));
        apply_arrival(&mut state, &turn(0, 1.0, 80, 0, false), &config, None).unwrap();
        assert_eq!(state.cached_blocks(0), 80);
        apply_arrival(&mut state, &turn(0, 2.0, 5, 0, true), &config, None).unwrap();
        assert_eq!(state.cached_blocks(0), 0);
    }

    #[test]
    fn length_aware_uses_true_next_prompt_for_budgets() {
        // Conversation 0's true next prompt is 40: with history 100 and
        // xi 150 its budget is max(100 + 40 - 150, 0) = 0 and its whole
        // cache is free to trim. A q_hat of 200 would have given budget 150
        // and an LRU fallback instead.
        let trace = Trace::new(
            vec![
                turn(0, 1.0, 100, 0, false),
                turn(1, 2.0, 60, 0, false),
                turn(0, 3.0, 40, 0, true),
                turn(1, 4.0, 120, 0, true),
            ],
            1,
        )
        .unwrap();
        let mut future = Clairvoyance::from_trace(&trace);
        let config = PolicyConfig::new(PolicyFamily::LengthAwareTlru(LengthAwareParams {
            xi_blocks: 150,
        }));
        let mut state = CacheState::new(50);
        let mut phases = Vec::new();
        for event in &trace.events[..2] {
            future.advance_past(event.conversation_id);
            let outcome = apply_arrival(&mut state, event, &config, Some(&future)).unwrap();
            if let Some(decision) = outcome.eviction {
                phases.extend(decision.evictions.iter().map(|e| e.phase));
            }
        }
        // Conversation 0 was drained entirely through budget-0 free trims;
        // no eviction ever needed the LRU fallback.
        assert_eq!(state.cached_blocks(0), 0);
        assert_eq!(state.cached_blocks(1), 50);
        assert!(phases.iter().all(|p| *p == EvictionPhase::TelSafeTrim));
    }

    #[test]
    fn variant_adjust_requires_variant_family() {
        let mut state = CacheState::new(10);
        let err = variant_adjust(&mut state, &turn(0, 1.0, 1, 0, true), &lru_config());
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn threshold_lru_admits_only_long_histories() {
        let config = PolicyConfig::new(PolicyFamily::ThresholdLru(ThresholdLruParams {
            cache_threshold_blocks: 10,
        }));
        let mut state = CacheState::new(100);
        let outcome =
            apply_arrival(&mut state, &turn(0, 1.0, 4, 0, false), &config, None).unwrap();
        assert_eq!(outcome.record.uncached_blocks, 4);
        assert_eq!(state.cached_blocks(0), 0);
        // Second turn pushes history to 12 >= 10: admitted.
        let outcome =
            apply_arrival(&mut state, &turn(0, 2.0, 8, 0, false), &config, None).unwrap();
        assert_eq!(outcome.record.uncached_blocks, 12);
        assert_eq!(state.cached_blocks(0), 12);
    }

    #[test]
    fn policy_config_json_round_trip() {
        let configs = vec![
            PolicyConfig::new(PolicyFamily::Lru),
            PolicyConfig::new(PolicyFamily::ThresholdLru(ThresholdLruParams::default())).forced(),
            tlru_config(150, 100),
            PolicyConfig::new(PolicyFamily::Etlru(EtlruParams {
                xi_blocks: 3,
                death_rate: 1.2,
                nominal_turn_rate: 2.0,
                turn_rate_overrides: [(4u32, 0.5)].into_iter().collect(),
                prompt_dist: PromptLengthDistribution::two_point(50, 150).unwrap(),
            })),
            PolicyConfig::new(PolicyFamily::EndAwareTlru(TlruParams {
                xi_blocks: 10,
                q_hat_blocks: 5,
            })),
            PolicyConfig::new(PolicyFamily::LengthAwareTlru(LengthAwareParams {
                xi_blocks: 7,
            })),
            PolicyConfig::new(PolicyFamily::TailBelady(TailBeladyParams { xi_blocks: 2 })),
        ];
        for config in configs {
            let json = serde_json::to_string(&config).unwrap();
            let back: PolicyConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, config, "round trip failed for {json}");
        }
    }

    #[test]
    fn invariants_hold_after_every_arrival() {
        let mut state = CacheState::new(12);
        let config = tlru_config(3, 2);
        let events = [
            turn(0, 1.0, 5, 2, false),
            turn(1, 2.0, 4, 1, false),
            turn(2, 3.0, 6, 0, false),
            turn(0, 4.0, 2, 2, true),
            turn(1, 5.0, 3, 1, true),
        ];
        for event in &events {
            apply_arrival(&mut state, event, &config, None).unwrap();
            state.assert_invariants();
        }
    }
}
