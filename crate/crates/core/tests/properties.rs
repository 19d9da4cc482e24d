//! Property tests for the structural invariants the policies and metrics
//! must hold on arbitrary inputs.

mod common;

use proptest::prelude::*;

use tailsim_core::error::Error;
use tailsim_core::metrics::{percentile, tel, LatencyModel, RequestRecord};
use tailsim_core::policy::{
    apply_arrival, etlru_evict, Clairvoyance, EtlruParams, PolicyConfig, PolicyFamily,
    TailBeladyParams, ThresholdLruParams, TlruParams,
};
use tailsim_core::sim::{replay, ReportSpec};
use tailsim_core::trace::{tokens_to_blocks, validate_trace, Trace};
use tailsim_core::workload::{generate_synthetic, PromptLengthDistribution, SyntheticParams};

fn small_workload(seed: u64, deterministic_prompt: Option<u64>) -> SyntheticParams {
    let prompt_length_dist = match deterministic_prompt {
        Some(q) => PromptLengthDistribution::deterministic(q),
        None => PromptLengthDistribution::two_point(1, 5).unwrap(),
    };
    SyntheticParams {
        conversation_birth_rate: 2.0,
        turn_rate: 3.0,
        turn_rate_overrides: vec![],
        death_rate: 1.0,
        prompt_length_dist,
        response_length_dist: PromptLengthDistribution::two_point(0, 3).unwrap(),
        max_events: 60,
        seed,
        block_size: 1,
    }
}

fn build_policy(pick: usize, xi: u64, q_hat: u64, trace: &Trace) -> PolicyConfig {
    let family = match pick % 7 {
        0 => PolicyFamily::Lru,
        1 => PolicyFamily::ThresholdLru(ThresholdLruParams {
            cache_threshold_blocks: 4 * q_hat + 1,
        }),
        2 => PolicyFamily::Tlru(TlruParams {
            xi_blocks: xi,
            q_hat_blocks: q_hat,
        }),
        3 => PolicyFamily::Etlru(EtlruParams {
            xi_blocks: xi,
            death_rate: 1.0,
            nominal_turn_rate: 1.0,
            turn_rate_overrides: vec![],
            prompt_dist: tailsim_core::workload::fit_prompt_distribution(trace).unwrap(),
        }),
        4 => PolicyFamily::EndAwareTlru(TlruParams {
            xi_blocks: xi,
            q_hat_blocks: q_hat,
        }),
        5 => PolicyFamily::LengthAwareTlru(tailsim_core::policy::LengthAwareParams {
            xi_blocks: xi,
        }),
        _ => PolicyFamily::TailBelady(TailBeladyParams { xi_blocks: xi }),
    };
    PolicyConfig::new(family)
}

proptest! {
    /// Every cache-state invariant holds after every arrival, for every
    /// policy family, in both caching modes. Forced mode may legitimately
    /// abort when a history alone exceeds capacity.
    #[test]
    fn cache_invariants_hold_after_every_arrival(
        seed in 0..500u64,
        capacity in 5..60u64,
        pick in 0..7usize,
        forced in any::<bool>(),
        xi in 0..20u64,
        q_hat in 0..8u64,
    ) {
        let trace = generate_synthetic(&small_workload(seed, None)).unwrap();
        let mut policy = build_policy(pick, xi, q_hat, &trace);
        if forced {
            policy = policy.forced();
        }
        let mut future = Clairvoyance::from_trace(&trace);
        let mut state = tailsim_core::policy::CacheState::new(capacity);
        for event in &trace.events {
            future.advance_past(event.conversation_id);
            match apply_arrival(&mut state, event, &policy, Some(&future)) {
                Ok(_) => state.assert_invariants(),
                Err(Error::CapacityInfeasible { .. }) if forced => break,
                Err(other) => return Err(TestCaseError::fail(format!("{other}"))),
            }
        }
    }

    /// TEL-safe trimming with the true deterministic next-prompt length
    /// never increases any single request's excess over plain LRU.
    #[test]
    fn tel_safe_trimming_never_hurts_any_request(
        seed in 0..400u64,
        capacity in 8..50u64,
        xi in 0..15u64,
        q in 1..8u64,
    ) {
        let trace = generate_synthetic(&small_workload(seed, Some(q))).unwrap();
        let model = LatencyModel::default();
        let spec = ReportSpec { xi_s_ms: xi as f64, slo_ms: vec![] };
        let trimmed = replay(
            &trace,
            &PolicyConfig::new(PolicyFamily::Tlru(TlruParams { xi_blocks: xi, q_hat_blocks: q })),
            capacity,
            &model,
            &spec,
        ).unwrap();
        let plain = replay(
            &trace,
            &PolicyConfig::new(PolicyFamily::Lru),
            capacity,
            &model,
            &spec,
        ).unwrap();
        for (a, b) in trimmed.records.iter().zip(plain.records.iter()) {
            let trimmed_excess = a.uncached_blocks.saturating_sub(xi);
            let plain_excess = b.uncached_blocks.saturating_sub(xi);
            prop_assert!(
                trimmed_excess <= plain_excess,
                "request at t={} got worse: {} vs {}",
                a.timestamp, trimmed_excess, plain_excess
            );
        }
    }

    /// With deterministic prompts and homogeneous rates the belief-weighted
    /// greedy and the two-phase trim produce identical eviction sequences.
    #[test]
    fn deterministic_prompts_collapse_etlru_to_tlru(
        seed in 0..300u64,
        capacity in 8..50u64,
        xi in 0..15u64,
        q in 1..8u64,
    ) {
        let trace = generate_synthetic(&small_workload(seed, Some(q))).unwrap();
        let model = LatencyModel::default();
        let spec = ReportSpec { xi_s_ms: xi as f64, slo_ms: vec![] };
        let tlru = replay(
            &trace,
            &PolicyConfig::new(PolicyFamily::Tlru(TlruParams { xi_blocks: xi, q_hat_blocks: q })),
            capacity,
            &model,
            &spec,
        ).unwrap();
        let etlru = replay(
            &trace,
            &PolicyConfig::new(PolicyFamily::Etlru(EtlruParams {
                xi_blocks: xi,
                death_rate: 1.0,
                nominal_turn_rate: 1.0,
                turn_rate_overrides: vec![],
                prompt_dist: PromptLengthDistribution::deterministic(q),
            })),
            capacity,
            &model,
            &spec,
        ).unwrap();
        prop_assert_eq!(tlru.eviction_block_sequence(), etlru.eviction_block_sequence());
    }

    /// Scaling every belief rate by a positive constant leaves the greedy
    /// eviction sequence unchanged (dyadic factors keep floats exact).
    #[test]
    fn eviction_ranking_is_scale_free(
        scenario_seed in 0..400u64,
        scale_pick in 0..4usize,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(scenario_seed);
        let scenario = common::random_scenario(&mut rng);
        let scale = [0.25, 0.5, 2.0, 8.0][scale_pick];

        let params = scenario.etlru_params();
        let mut scaled_params = params.clone();
        scaled_params.turn_rate_overrides = scaled_params
            .turn_rate_overrides
            .into_iter()
            .map(|(id, r)| (id, r * scale))
            .collect();

        let mut state_a = scenario.to_state();
        let mut state_b = scenario.to_state();
        let overflow = state_a.total_cached().saturating_sub(scenario.capacity);
        let a = etlru_evict(&mut state_a, scenario.now, overflow, &params, None);
        let b = etlru_evict(&mut state_b, scenario.now, overflow, &scaled_params, None);
        prop_assert_eq!(a.block_sequence(), b.block_sequence());
    }

    /// Nearest-rank percentile ignores input order and is monotone in p.
    #[test]
    fn percentile_permutation_invariant_and_monotone(
        mut values in proptest::collection::vec(0.0..1000.0f64, 1..80),
        shuffle_seed in any::<u64>(),
        p_low in 1.0..99.0f64,
        p_delta in 0.0..50.0f64,
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let p_high = (p_low + p_delta).min(100.0);
        let original = percentile(&values, p_low).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(shuffle_seed);
        values.shuffle(&mut rng);
        prop_assert_eq!(percentile(&values, p_low).unwrap(), original);
        prop_assert!(percentile(&values, p_high).unwrap() >= original);
    }

    /// tel at threshold zero is the plain TTFT total, and scaling records
    /// and threshold by a power of two scales tel exactly.
    #[test]
    fn tel_scaling_properties(
        uncached in proptest::collection::vec(0..500u64, 1..60),
        xi_s in 0.0..400.0f64,
        scale_pick in 0..4usize,
    ) {
        let records: Vec<RequestRecord> = uncached
            .iter()
            .enumerate()
            .map(|(i, &b)| RequestRecord {
                conversation_id: i as u32,
                timestamp: i as f64,
                uncached_blocks: b,
                cached_blocks_used: 0,
                ttft_ms: b as f64,
            })
            .collect();
        let total: f64 = records.iter().map(|r| r.ttft_ms).sum();
        prop_assert_eq!(tel(&records, 0.0), total);

        let scale = [0.25, 0.5, 2.0, 8.0][scale_pick];
        let scaled: Vec<RequestRecord> = records
            .iter()
            .map(|r| RequestRecord { ttft_ms: r.ttft_ms * scale, ..*r })
            .collect();
        prop_assert_eq!(tel(&scaled, scale * xi_s), scale * tel(&records, xi_s));
    }

    /// Block quantization is monotone and exact on multiples.
    #[test]
    fn tokens_to_blocks_monotone_and_exact(
        tokens in 0..100_000u64,
        step in 1..500u64,
        block_size in 1..512u32,
    ) {
        let a = tokens_to_blocks(tokens, block_size).unwrap();
        let b = tokens_to_blocks(tokens + step, block_size).unwrap();
        prop_assert!(a <= b);
        let n = tokens % 300;
        prop_assert_eq!(
            tokens_to_blocks(n * block_size as u64, block_size).unwrap(),
            n
        );
    }

    /// Every synthetic trace passes validation, whatever the parameters.
    #[test]
    fn generated_traces_always_validate(
        seed in any::<u64>(),
        birth in 0.2..8.0f64,
        turn in 0.5..8.0f64,
        death in 0.2..4.0f64,
        max_events in 1..150usize,
    ) {
        let params = SyntheticParams {
            conversation_birth_rate: birth,
            turn_rate: turn,
            turn_rate_overrides: vec![],
            death_rate: death,
            prompt_length_dist: PromptLengthDistribution::two_point(1, 9).unwrap(),
            response_length_dist: PromptLengthDistribution::two_point(0, 6).unwrap(),
            max_events,
            seed,
            block_size: 1,
        };
        let trace = generate_synthetic(&params).unwrap();
        prop_assert_eq!(trace.events.len(), max_events);
        prop_assert!(validate_trace(&trace).is_valid());
    }
}
