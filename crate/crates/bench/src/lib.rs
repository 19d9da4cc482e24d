//! Benchmark fixtures shared by the criterion targets.

use tailsim_core::policy::{EtlruParams, PolicyConfig, PolicyFamily, TailBeladyParams, TlruParams};
use tailsim_core::workload::{generate_synthetic, PromptLengthDistribution, SyntheticParams};
use tailsim_core::Trace;

/// A trace with enough concurrency to keep every policy's eviction path hot.
pub fn benchmark_trace(events: usize, seed: u64) -> Trace {
    let params = SyntheticParams {
        conversation_birth_rate: 4.0,
        ..SyntheticParams::wildchat_like_preset(events, seed)
    };
    generate_synthetic(&params).expect("static parameters are valid")
}

/// The policy lineup exercised by the replay benchmarks.
pub fn benchmark_policies() -> Vec<(&'static str, PolicyConfig)> {
    vec![
        ("lru", PolicyConfig::new(PolicyFamily::Lru)),
        (
            "tlru",
            PolicyConfig::new(PolicyFamily::Tlru(TlruParams {
                xi_blocks: 600,
                q_hat_blocks: 200,
            })),
        ),
        (
            "etlru",
            PolicyConfig::new(PolicyFamily::Etlru(EtlruParams {
                xi_blocks: 600,
                death_rate: 1.2,
                nominal_turn_rate: 3.0,
                turn_rate_overrides: vec![],
                prompt_dist: PromptLengthDistribution::two_point(100, 300)
                    .expect("valid two-point"),
            })),
        ),
        (
            "tail_belady",
            PolicyConfig::new(PolicyFamily::TailBelady(TailBeladyParams { xi_blocks: 600 })),
        ),
    ]
}
