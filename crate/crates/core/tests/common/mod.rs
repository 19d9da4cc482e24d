//! Shared test machinery: an independent brute-force evaluator for the
//! expected-tail eviction objective, and random micro-scenarios for it.
//!
//! Everything here is deliberately separate from the library's policy code
//! so greedy eviction can be checked against plain enumeration.
#![allow(dead_code)] // each test target uses a different subset

use rand::Rng;
use tailsim_core::policy::{CacheState, EtlruParams};
use tailsim_core::workload::PromptLengthDistribution;

/// A single post-arrival eviction scenario: conversation `arriving` has just
/// been served, its full history sits in the cache, and the policy must
/// choose a feasible allocation.
#[derive(Debug, Clone)]
pub struct EvictionScenario {
    pub capacity: u64,
    pub xi_blocks: u64,
    pub arriving: u32,
    /// Post-serve history per conversation.
    pub histories: Vec<u64>,
    /// Cache held before the arrival; ignored for `arriving` whose cache
    /// resets to its full history.
    pub pre_cached: Vec<u64>,
    pub taus: Vec<f64>,
    pub now: f64,
    pub turn_rates: Vec<f64>,
    pub death_rate: f64,
    pub prompt_dist: PromptLengthDistribution,
}

impl EvictionScenario {
    /// Per-conversation upper bound of the feasible allocation set.
    pub fn allocation_caps(&self) -> Vec<u64> {
        (0..self.histories.len())
            .map(|i| {
                if i as u32 == self.arriving {
                    self.histories[i]
                } else {
                    self.pre_cached[i]
                }
            })
            .collect()
    }

    /// Belief-weighted expected next-turn excess for one allocation:
    /// `sum_i rate_i * exp(-mu * silence_i) * E[(L_i + Q - Y_i - xi)^+]`.
    pub fn objective(&self, allocation: &[u64]) -> f64 {
        allocation
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let silence = self.now - self.taus[i];
                let belief = self.turn_rates[i] * (-self.death_rate * silence).exp();
                let shift = self.histories[i] as i64 - y as i64 - self.xi_blocks as i64;
                belief * self.prompt_dist.expected_shifted_positive_part(shift)
            })
            .sum()
    }

    /// Exhaustive minimum of the objective over every feasible allocation.
    pub fn exhaustive_minimum(&self) -> f64 {
        let caps = self.allocation_caps();
        let mut best = f64::INFINITY;
        let mut current = vec![0u64; caps.len()];
        self.search(&caps, 0, 0, &mut current, &mut best);
        best
    }

    fn search(&self, caps: &[u64], index: usize, used: u64, current: &mut Vec<u64>, best: &mut f64) {
        if index == caps.len() {
            let value = self.objective(current);
            if value < *best {
                *best = value;
            }
            return;
        }
        let limit = caps[index].min(self.capacity - used);
        for y in 0..=limit {
            current[index] = y;
            self.search(caps, index + 1, used + y, current, best);
        }
    }

    /// Cache state at the decision point, with the arriving conversation's
    /// full history resident.
    pub fn to_state(&self) -> CacheState {
        let mut state = CacheState::new(self.capacity);
        for i in 0..self.histories.len() {
            let cached = if i as u32 == self.arriving {
                self.histories[i]
            } else {
                self.pre_cached[i]
            };
            state.seed_conversation(i as u32, self.histories[i], cached, self.taus[i]);
        }
        state
    }

    pub fn etlru_params(&self) -> EtlruParams {
        EtlruParams {
            xi_blocks: self.xi_blocks,
            death_rate: self.death_rate,
            nominal_turn_rate: 1.0,
            turn_rate_overrides: self
                .turn_rates
                .iter()
                .enumerate()
                .map(|(i, r)| (i as u32, *r))
                .collect(),
            prompt_dist: self.prompt_dist.clone(),
        }
    }
}

/// Draw a random scenario within the exhaustive-search bounds: at most 4
/// conversations, capacity at most 6, two-point prompt distributions with
/// dyadic probabilities (so objective arithmetic is exact).
pub fn random_scenario<R: Rng>(rng: &mut R) -> EvictionScenario {
    let n = rng.gen_range(1..=4usize);
    let capacity = rng.gen_range(1..=6u64);
    let histories: Vec<u64> = (0..n).map(|_| rng.gen_range(1..=6u64)).collect();
    let pre_cached: Vec<u64> = histories
        .iter()
        .map(|&h| rng.gen_range(0..=h))
        .collect();
    let arriving = rng.gen_range(0..n) as u32;
    let now = 10.0;
    let taus: Vec<f64> = (0..n)
        .map(|i| {
            if i as u32 == arriving {
                now
            } else {
                rng.gen_range(0.0..now)
            }
        })
        .collect();
    let rate_choices = [0.5, 1.0, 2.0, 4.0];
    let turn_rates: Vec<f64> = (0..n)
        .map(|_| rate_choices[rng.gen_range(0..rate_choices.len())])
        .collect();
    let low = rng.gen_range(1..=3u64);
    let high = rng.gen_range(low + 1..=7u64);
    let prob_choices = [0.25, 0.5, 0.75];
    let p = prob_choices[rng.gen_range(0..prob_choices.len())];
    let prompt_dist =
        PromptLengthDistribution::new(vec![(low, p), (high, 1.0 - p)]).expect("valid two-point");

    EvictionScenario {
        capacity,
        xi_blocks: rng.gen_range(0..=6u64),
        arriving,
        histories,
        pre_cached,
        taus,
        now,
        turn_rates,
        death_rate: if rng.gen_bool(0.5) { 0.5 } else { 1.0 },
        prompt_dist,
    }
}
