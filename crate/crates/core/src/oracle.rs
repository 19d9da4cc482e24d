//! Exact hindsight solver for the tail-excess-latency integer program on
//! micro-instances.
//!
//! The solver enumerates feasible cache-state vectors step by step
//! (dynamic programming over states, which agrees with full enumeration)
//! and returns the globally optimal total excess
//! `sum_t max(L(t) + q_t - x_t - xi, 0)` subject to the capacity bound,
//! the history bound, and the rule that a conversation's cache grows only
//! at its own arrivals. It exists solely to certify the online and
//! clairvoyant policies on small instances, so hard bounds on instance
//! size are enforced and anything larger is rejected.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CachingMode;
use crate::trace::{Trace, TurnEvent};

/// Hard limits under which exhaustive search stays well below a second.
pub const MAX_CONVERSATIONS: usize = 3;
pub const MAX_STEPS: usize = 6;
pub const MAX_CAPACITY: u64 = 8;
pub const MAX_TURN_BLOCKS: u64 = 4;

/// One arrival in a hindsight instance. Steps are globally ordered and
/// disjoint across conversations; tied steps have no defined semantics and
/// are rejected by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrivalStep {
    pub conversation: usize,
    pub prompt_blocks: u64,
    pub response_blocks: u64,
}

/// A micro-instance of the hindsight problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HindsightInstance {
    pub steps: Vec<ArrivalStep>,
    pub capacity: u64,
    pub xi_blocks: u64,
}

impl HindsightInstance {
    pub fn conversation_count(&self) -> usize {
        self.steps
            .iter()
            .map(|s| s.conversation + 1)
            .max()
            .unwrap_or(0)
    }

    fn check_bounds(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::EmptyInput("instance has no steps".into()));
        }
        if self.conversation_count() > MAX_CONVERSATIONS {
            return Err(Error::InstanceTooLarge(format!(
                "{} conversations exceed the limit of {MAX_CONVERSATIONS}",
                self.conversation_count()
            )));
        }
        if self.steps.len() > MAX_STEPS {
            return Err(Error::InstanceTooLarge(format!(
                "{} steps exceed the limit of {MAX_STEPS}",
                self.steps.len()
            )));
        }
        if self.capacity > MAX_CAPACITY {
            return Err(Error::InstanceTooLarge(format!(
                "capacity {} exceeds the limit of {MAX_CAPACITY}",
                self.capacity
            )));
        }
        if self
            .steps
            .iter()
            .any(|s| s.prompt_blocks > MAX_TURN_BLOCKS || s.response_blocks > MAX_TURN_BLOCKS)
        {
            return Err(Error::InstanceTooLarge(format!(
                "turn sizes exceed the limit of {MAX_TURN_BLOCKS} blocks"
            )));
        }
        Ok(())
    }

    /// Job size (history plus prompt) seen at each step.
    pub fn job_sizes(&self) -> Vec<u64> {
        let n = self.conversation_count();
        let mut history = vec![0u64; n];
        self.steps
            .iter()
            .map(|s| {
                let job = history[s.conversation] + s.prompt_blocks;
                history[s.conversation] += s.prompt_blocks + s.response_blocks;
                job
            })
            .collect()
    }

    /// Post-serve history after each step, for the arriving conversation.
    fn post_histories(&self) -> Vec<u64> {
        let n = self.conversation_count();
        let mut history = vec![0u64; n];
        self.steps
            .iter()
            .map(|s| {
                history[s.conversation] += s.prompt_blocks + s.response_blocks;
                history[s.conversation]
            })
            .collect()
    }

    /// TEL-safe budget at each step: `max(job - xi, 0)`.
    pub fn budgets(&self) -> Vec<u64> {
        self.job_sizes()
            .iter()
            .map(|job| job.saturating_sub(self.xi_blocks))
            .collect()
    }

    /// The instance-level constant of the hit-equivalence identity:
    /// `sum_t max(job_t - xi, 0)`.
    pub fn excess_constant(&self) -> u64 {
        self.job_sizes()
            .iter()
            .map(|job| job.saturating_sub(self.xi_blocks))
            .sum()
    }

    /// Render the instance as a replayable trace: step index as timestamp,
    /// conversations relabeled densely in first-arrival order.
    pub fn to_trace(&self) -> Trace {
        let mut events: Vec<TurnEvent> = self
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| TurnEvent {
                conversation_id: s.conversation as u32,
                timestamp: (t + 1) as f64,
                prompt_blocks: s.prompt_blocks,
                response_blocks: s.response_blocks,
                is_last_turn: false,
            })
            .collect();
        let mut last: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            last.insert(e.conversation_id, i);
        }
        for &i in last.values() {
            events[i].is_last_turn = true;
        }
        let mut trace = Trace::new(events, 1).expect("positive block size");
        trace.normalize();
        trace
    }

    /// Whether forced caching is feasible: every post-serve history must
    /// fit in the cache on its own.
    pub fn forced_feasible(&self) -> bool {
        self.post_histories().iter().all(|&h| h <= self.capacity)
    }
}

/// An optimal cache schedule plus the optimum it certifies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HindsightSolution {
    /// Optimal TEL in block units (`TEL / alpha`).
    pub optimal_tel_blocks: u64,
    /// `schedule[t][i]`: blocks cached for conversation `i` immediately
    /// before the arrival at step `t`.
    pub schedule: Vec<Vec<u64>>,
    /// States enumerated by the solver, for audit.
    pub states_explored: u64,
}

type StateVec = Vec<u64>;

/// Enumerates all feasible post-serve vectors `y` given the pre-arrival
/// vector `x`, the arriving conversation, and its post-serve history.
struct ChoiceEnumerator<'a> {
    x: &'a StateVec,
    theta: usize,
    theta_min: u64,
    theta_max: u64,
    capacity: u64,
    out: Vec<StateVec>,
}

impl ChoiceEnumerator<'_> {
    fn fill(&mut self, index: usize, used: u64, current: &mut StateVec) {
        if index == self.x.len() {
            self.out.push(current.clone());
            return;
        }
        let (lower, upper) = if index == self.theta {
            (self.theta_min, self.theta_max)
        } else {
            (0, self.x[index])
        };
        for value in lower..=upper.min(self.capacity - used) {
            current[index] = value;
            self.fill(index + 1, used + value, current);
        }
    }
}

fn feasible_choices(
    x: &StateVec,
    theta: usize,
    post_history: u64,
    capacity: u64,
    mode: CachingMode,
) -> Vec<StateVec> {
    let (theta_min, theta_max) = match mode {
        CachingMode::Optional => (0, post_history.min(capacity)),
        CachingMode::Forced => {
            if post_history > capacity {
                return Vec::new();
            }
            (post_history, post_history)
        }
    };
    let mut enumerator = ChoiceEnumerator {
        x,
        theta,
        theta_min,
        theta_max,
        capacity,
        out: Vec::new(),
    };
    enumerator.fill(0, 0, &mut vec![0u64; x.len()]);
    enumerator.out
}

/// Solve the hindsight program exactly.
///
/// Rejects instances outside the enforced bounds. Under optional caching the
/// all-zero schedule is always feasible; under forced caching an instance
/// whose histories cannot fit returns a capacity-infeasible error.
pub fn solve_hindsight_tel(
    instance: &HindsightInstance,
    mode: CachingMode,
) -> Result<HindsightSolution> {
    instance.check_bounds()?;
    let n = instance.conversation_count();
    let jobs = instance.job_sizes();
    let posts = instance.post_histories();

    // layer: pre-arrival state -> (best cost so far, predecessor state).
    let mut layer: BTreeMap<StateVec, (u64, Option<StateVec>)> = BTreeMap::new();
    layer.insert(vec![0u64; n], (0, None));
    let mut parents: Vec<BTreeMap<StateVec, StateVec>> = Vec::new();
    let mut states_explored = 0u64;

    for (t, step) in instance.steps.iter().enumerate() {
        let mut next: BTreeMap<StateVec, (u64, Option<StateVec>)> = BTreeMap::new();
        for (x, (cost, _)) in &layer {
            states_explored += 1;
            let excess = jobs[t]
                .saturating_sub(x[step.conversation])
                .saturating_sub(instance.xi_blocks);
            let total = cost + excess;
            for y in feasible_choices(x, step.conversation, posts[t], instance.capacity, mode) {
                match next.get(&y) {
                    Some((best, _)) if *best <= total => {}
                    _ => {
                        next.insert(y, (total, Some(x.clone())));
                    }
                }
            }
        }
        if next.is_empty() {
            return Err(Error::CapacityInfeasible {
                conversation_id: step.conversation as u32,
                history_blocks: posts[t],
                capacity: instance.capacity,
            });
        }
        parents.push(
            next.iter()
                .map(|(y, (_, parent))| (y.clone(), parent.clone().expect("parent recorded")))
                .collect(),
        );
        layer = next;
    }

    let (final_state, (optimal, _)) = layer
        .iter()
        .min_by_key(|(state, (cost, _))| (*cost, (*state).clone()))
        .expect("non-empty layer");
    let optimal = *optimal;

    // Walk parents back to recover the pre-arrival schedule.
    let mut schedule = vec![final_state.clone()];
    for t in (0..instance.steps.len()).rev() {
        let child = schedule.last().unwrap().clone();
        schedule.push(parents[t][&child].clone());
    }
    schedule.reverse();
    schedule.pop(); // drop the post-final state: schedule[t] is pre-arrival
    debug_assert_eq!(schedule.len(), instance.steps.len());

    let solution = HindsightSolution {
        optimal_tel_blocks: optimal,
        schedule,
        states_explored,
    };
    debug_assert_eq!(
        evaluate_schedule(instance, &solution.schedule, mode).expect("solver output feasible"),
        optimal
    );
    Ok(solution)
}

/// Recompute TEL for a full pre-arrival schedule, checking feasibility of
/// every transition. Errors on any constraint violation.
pub fn evaluate_schedule(
    instance: &HindsightInstance,
    schedule: &[Vec<u64>],
    mode: CachingMode,
) -> Result<u64> {
    let n = instance.conversation_count();
    if schedule.len() != instance.steps.len() {
        return Err(Error::InvalidConfig(format!(
            "schedule has {} steps, instance has {}",
            schedule.len(),
            instance.steps.len()
        )));
    }
    let jobs = instance.job_sizes();
    let posts = instance.post_histories();
    let mut tel = 0u64;
    for (t, step) in instance.steps.iter().enumerate() {
        let x = &schedule[t];
        if x.len() != n {
            return Err(Error::InvalidConfig(format!(
                "schedule step {t} has dimension {}, expected {n}",
                x.len()
            )));
        }
        if x.iter().sum::<u64>() > instance.capacity {
            return Err(Error::InvalidConfig(format!(
                "schedule step {t} exceeds capacity"
            )));
        }
        if t == 0 && x.iter().any(|&v| v != 0) {
            return Err(Error::InvalidConfig(
                "schedule must start from an empty cache".into(),
            ));
        }
        if t > 0 {
            let prev_step = &instance.steps[t - 1];
            let prev = &schedule[t - 1];
            for i in 0..n {
                if i == prev_step.conversation {
                    match mode {
                        CachingMode::Optional => {
                            if x[i] > posts[t - 1] {
                                return Err(Error::InvalidConfig(format!(
                                    "step {t}: conversation {i} caches beyond its history"
                                )));
                            }
                        }
                        CachingMode::Forced => {
                            if x[i] != posts[t - 1] {
                                return Err(Error::InvalidConfig(format!(
                                    "step {t}: forced caching requires the full history"
                                )));
                            }
                        }
                    }
                } else if x[i] > prev[i] {
                    return Err(Error::InvalidConfig(format!(
                        "step {t}: conversation {i} cache grew without an arrival"
                    )));
                }
            }
        }
        tel += jobs[t]
            .saturating_sub(x[step.conversation])
            .saturating_sub(instance.xi_blocks);
    }
    Ok(tel)
}

/// Clamp every pre-arrival value to the TEL-safe budget of the
/// conversation's next arrival at or after that step (0 when it never
/// arrives again).
fn clamp_to_budgets(instance: &HindsightInstance, schedule: &[Vec<u64>]) -> Vec<Vec<u64>> {
    let budgets = instance.budgets();
    let mut clamped = schedule.to_vec();
    for (s, state) in clamped.iter_mut().enumerate() {
        for (i, value) in state.iter_mut().enumerate() {
            let cap = instance
                .steps
                .iter()
                .enumerate()
                .skip(s)
                .find(|(_, step)| step.conversation == i)
                .map(|(t, _)| budgets[t])
                .unwrap_or(0);
            *value = (*value).min(cap);
        }
    }
    clamped
}

/// Check that capping a feasible optional-mode solution to the TEL-safe
/// budgets keeps it feasible with an unchanged objective: some optimum
/// always lives inside the budget caps.
pub fn verify_budget_cap(
    solution: &HindsightSolution,
    instance: &HindsightInstance,
) -> Result<bool> {
    let original = evaluate_schedule(instance, &solution.schedule, CachingMode::Optional)?;
    let clamped = clamp_to_budgets(instance, &solution.schedule);
    let clamped_tel = match evaluate_schedule(instance, &clamped, CachingMode::Optional) {
        Ok(tel) => tel,
        Err(_) => return Ok(false),
    };
    Ok(clamped_tel == original)
}

/// Total reused blocks of a budget-capped schedule:
/// `sum over arrivals of x[theta_t, t]`. For capped schedules the identity
/// `TEL + sum x = excess_constant` links this to the TEL objective; a
/// schedule exceeding its caps is rejected.
pub fn hit_equivalence_value(instance: &HindsightInstance, schedule: &[Vec<u64>]) -> Result<u64> {
    let budgets = instance.budgets();
    for (t, step) in instance.steps.iter().enumerate() {
        if schedule[t][step.conversation] > budgets[t] {
            return Err(Error::InvalidConfig(format!(
                "schedule step {t} exceeds the TEL-safe budget"
            )));
        }
    }
    Ok(instance
        .steps
        .iter()
        .enumerate()
        .map(|(t, step)| schedule[t][step.conversation])
        .sum())
}

/// Generation limits for random micro-instances. Must stay within the
/// solver's hard bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceBounds {
    pub max_conversations: usize,
    pub max_steps: usize,
    pub max_capacity: u64,
    pub max_turn_blocks: u64,
    pub max_xi_blocks: u64,
}

impl Default for InstanceBounds {
    fn default() -> Self {
        InstanceBounds {
            max_conversations: MAX_CONVERSATIONS,
            max_steps: MAX_STEPS,
            max_capacity: MAX_CAPACITY,
            max_turn_blocks: MAX_TURN_BLOCKS,
            max_xi_blocks: 4,
        }
    }
}

impl InstanceBounds {
    pub fn validate(&self) -> Result<()> {
        if self.max_conversations == 0
            || self.max_steps == 0
            || self.max_capacity == 0
            || self.max_turn_blocks == 0
        {
            return Err(Error::InvalidConfig(
                "instance bounds must be at least 1".into(),
            ));
        }
        if self.max_conversations > MAX_CONVERSATIONS
            || self.max_steps > MAX_STEPS
            || self.max_capacity > MAX_CAPACITY
            || self.max_turn_blocks > MAX_TURN_BLOCKS
        {
            return Err(Error::InstanceTooLarge(format!(
                "bounds exceed solver limits ({MAX_CONVERSATIONS} conversations, \
                 {MAX_STEPS} steps, capacity {MAX_CAPACITY}, sizes {MAX_TURN_BLOCKS})"
            )));
        }
        Ok(())
    }
}

/// Draw a random in-bounds instance. Conversations are relabeled densely in
/// first-arrival order.
pub fn random_instance<R: Rng>(rng: &mut R, bounds: &InstanceBounds) -> HindsightInstance {
    let conversations = rng.gen_range(1..=bounds.max_conversations);
    let steps_count = rng.gen_range(conversations..=bounds.max_steps.max(conversations));
    let mut steps: Vec<ArrivalStep> = (0..steps_count)
        .map(|t| ArrivalStep {
            // First few steps hit each conversation once so all exist.
            conversation: if t < conversations {
                t
            } else {
                rng.gen_range(0..conversations)
            },
            prompt_blocks: rng.gen_range(1..=bounds.max_turn_blocks),
            response_blocks: rng.gen_range(0..=bounds.max_turn_blocks),
        })
        .collect();

    // Shuffle arrival order, then relabel in first-arrival order.
    for t in (1..steps.len()).rev() {
        let j = rng.gen_range(0..=t);
        steps.swap(t, j);
    }
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    for step in &mut steps {
        let next = relabel.len();
        let id = *relabel.entry(step.conversation).or_insert(next);
        step.conversation = id;
    }

    HindsightInstance {
        steps,
        capacity: rng.gen_range(1..=bounds.max_capacity),
        xi_blocks: rng.gen_range(0..=bounds.max_xi_blocks),
    }
}
