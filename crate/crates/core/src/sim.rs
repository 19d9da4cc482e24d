//! Event-driven replay engine binding traces, policies, and metrics, plus
//! the comparison, oracle-certification, and Monte-Carlo workflows behind
//! the command-line surface.
//!
//! Replays are deterministic: identical (trace, policy, capacity) inputs
//! produce identical records, reports, and CSV bytes. Clairvoyant data (the
//! next-arrival map and ground-truth termination flags) is computed in one
//! pre-pass over the trace and injected only into the policies that are
//! allowed to see it, keeping online policies honestly online. Sweep cells
//! and Monte-Carlo seeds are independent jobs executed in parallel and
//! joined in deterministic key order.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{relative_improvement, ttft, LatencyModel, MetricsReport, RequestRecord};
use crate::oracle::{
    random_instance, solve_hindsight_tel, HindsightInstance, InstanceBounds,
};
use crate::policy::{
    apply_arrival, CacheState, CachingMode, Clairvoyance, EvictionDecision, PolicyConfig,
    PolicyFamily,
};
use crate::trace::{validate_trace, ConversationId, Trace};
use crate::workload::{generate_synthetic, load_conversations_from_path, SyntheticParams};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Thresholds the per-replay report is computed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSpec {
    /// Latency threshold in milliseconds for the TEL figures.
    pub xi_s_ms: f64,
    /// SLO thresholds in milliseconds, strict-exceed counting.
    pub slo_ms: Vec<f64>,
}

impl Default for ReportSpec {
    fn default() -> Self {
        ReportSpec {
            xi_s_ms: 200.0,
            slo_ms: vec![200.0],
        }
    }
}

/// One block eviction attributed to the trace event that triggered it.
pub type EvictionLogEntry = (usize, ConversationId);

/// Full outcome of replaying one trace under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub records: Vec<RequestRecord>,
    pub report: MetricsReport,
    /// Per-event eviction decisions, in trace order.
    pub evictions: Vec<(usize, EvictionDecision)>,
}

impl ReplayOutcome {
    /// The policy's eviction history flattened to one entry per block, the
    /// canonical form for sequence-equality comparisons.
    pub fn eviction_block_sequence(&self) -> Vec<EvictionLogEntry> {
        let mut sequence = Vec::new();
        for (event_index, decision) in &self.evictions {
            for id in decision.block_sequence() {
                sequence.push((*event_index, id));
            }
        }
        sequence
    }
}

/// Replay a trace under one policy at one capacity.
///
/// Events are processed in order; each request's uncached blocks are read
/// off the current cache state, then the policy updates the state. The
/// clairvoyant next-arrival map is maintained for policies that need it.
pub fn replay(
    trace: &Trace,
    policy: &PolicyConfig,
    capacity: u64,
    model: &LatencyModel,
    spec: &ReportSpec,
) -> Result<ReplayOutcome> {
    let validation = validate_trace(trace);
    if !validation.is_valid() {
        return Err(Error::InvalidTrace(validation));
    }
    if trace.events.is_empty() {
        return Err(Error::EmptyInput("replay of empty trace".into()));
    }
    model.validate()?;
    if policy.needs_last_turn_flags() {
        ensure_last_turn_flags(trace)?;
    }

    let mut future = (policy.needs_clairvoyance() || policy.needs_last_turn_flags())
        .then(|| Clairvoyance::from_trace(trace));

    let mut state = CacheState::new(capacity);
    let mut records = Vec::with_capacity(trace.events.len());
    let mut evictions = Vec::new();

    for (index, event) in trace.events.iter().enumerate() {
        if let Some(future) = future.as_mut() {
            future.advance_past(event.conversation_id);
        }
        let outcome = apply_arrival(&mut state, event, policy, future.as_ref())
            .map_err(|e| e.at_event(index))?;
        records.push(RequestRecord {
            conversation_id: outcome.record.conversation_id,
            timestamp: outcome.record.timestamp,
            uncached_blocks: outcome.record.uncached_blocks,
            cached_blocks_used: outcome.record.cached_blocks_used,
            ttft_ms: ttft(outcome.record.uncached_blocks, model),
        });
        if let Some(decision) = outcome.eviction {
            evictions.push((index, decision));
        }
    }

    let xi_blocks = policy
        .xi_blocks()
        .unwrap_or_else(|| model.ms_to_blocks(spec.xi_s_ms));
    let report = MetricsReport::from_records(&records, spec.xi_s_ms, xi_blocks, &spec.slo_ms)?;
    Ok(ReplayOutcome {
        records,
        report,
        evictions,
    })
}

/// End-aware policies need every conversation's final turn flagged.
fn ensure_last_turn_flags(trace: &Trace) -> Result<()> {
    let mut last: std::collections::HashMap<ConversationId, usize> = Default::default();
    for (i, e) in trace.events.iter().enumerate() {
        last.insert(e.conversation_id, i);
    }
    for (id, &i) in &last {
        if !trace.events[i].is_last_turn {
            return Err(Error::InvalidConfig(format!(
                "trace lacks is_last_turn flags: conversation {id} never terminates"
            )));
        }
    }
    Ok(())
}

/// Where the trace for a run comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    File { path: String },
    Synthetic(SyntheticParams),
}

impl TraceSource {
    pub fn load(&self, block_size: u32, max_turns: Option<usize>) -> Result<Trace> {
        match self {
            TraceSource::File { path } => load_conversations_from_path(path, block_size, max_turns),
            TraceSource::Synthetic(params) => {
                // Cap generation itself so final-turn flags stay correct.
                let mut params = params.clone();
                if let Some(cap) = max_turns {
                    params.max_events = params.max_events.min(cap);
                }
                generate_synthetic(&params)
            }
        }
    }
}

/// A full comparison run: one trace replayed across a policy, capacity, and
/// latency-threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub trace: TraceSource,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_turns: Option<usize>,
    pub policies: Vec<PolicyConfig>,
    pub capacities: Vec<u64>,
    /// Latency thresholds in milliseconds. Each cell converts its threshold
    /// to blocks (`xi = xi_s / alpha`, rounded to the nearest block) and
    /// installs it into policies that carry one.
    pub xi_ms: Vec<f64>,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default = "default_slo")]
    pub slo_ms: Vec<f64>,
    /// Label of the baseline policy for improvement cells; defaults to the
    /// first policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Overrides the synthetic trace seed when the source is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Default output directory for the command-line surface.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

fn default_block_size() -> u32 {
    1
}

fn default_slo() -> Vec<f64> {
    vec![200.0]
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::InvalidConfig("no policies configured".into()));
        }
        if self.capacities.is_empty() {
            return Err(Error::InvalidConfig("no capacities configured".into()));
        }
        if self.xi_ms.is_empty() {
            return Err(Error::InvalidConfig("no latency thresholds configured".into()));
        }
        self.latency.validate()?;
        Ok(())
    }

    pub fn baseline_label(&self) -> String {
        self.baseline
            .clone()
            .unwrap_or_else(|| self.policies[0].label())
    }

    /// Load the configured trace, applying the seed override to synthetic
    /// sources.
    pub fn load_trace(&self) -> Result<Trace> {
        let mut source = self.trace.clone();
        if let (Some(seed), TraceSource::Synthetic(params)) = (self.seed, &mut source) {
            params.seed = seed;
        }
        source.load(self.block_size, self.max_turns)
    }
}

/// One (policy, capacity, threshold) cell of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub policy: String,
    pub capacity: u64,
    pub xi_s_ms: f64,
    pub report: MetricsReport,
}

/// Relative improvement of one policy over the baseline at one cell,
/// percentages with the paper-table sign convention (regressions negative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementCell {
    pub policy: String,
    pub capacity: u64,
    pub xi_s_ms: f64,
    pub p50_improvement_pct: f64,
    pub p90_improvement_pct: f64,
    pub p95_improvement_pct: f64,
    pub p99_improvement_pct: f64,
    pub tel_improvement_pct: f64,
    pub slo_violation_improvement_pct: Option<f64>,
}

/// Raw reports plus derived improvement cells for a full grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: String,
    pub cells: Vec<CellReport>,
    pub improvements: Vec<ImprovementCell>,
}

impl ComparisonTable {
    pub fn cell(&self, policy: &str, capacity: u64, xi_s_ms: f64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.policy == policy && c.capacity == capacity && c.xi_s_ms == xi_s_ms)
    }
}

/// Replay every (policy, capacity, threshold) cell of the grid on the same
/// trace and derive improvement cells against the baseline.
pub fn compare(config: &RunConfig) -> Result<ComparisonTable> {
    config.validate()?;
    let trace = config.load_trace()?;

    let mut specs = Vec::new();
    for policy in &config.policies {
        for &capacity in &config.capacities {
            for &xi_s_ms in &config.xi_ms {
                specs.push((policy.clone(), capacity, xi_s_ms));
            }
        }
    }

    let cells: Vec<CellReport> = specs
        .into_par_iter()
        .map(|(policy, capacity, xi_s_ms)| {
            let xi_blocks = config.latency.ms_to_blocks(xi_s_ms);
            let cell_policy = policy.clone().with_xi_blocks(xi_blocks);
            let spec = ReportSpec {
                xi_s_ms,
                slo_ms: config.slo_ms.clone(),
            };
            let outcome = replay(&trace, &cell_policy, capacity, &config.latency, &spec)
                .map_err(|e| {
                    Error::InvalidConfig(format!(
                        "cell (policy={}, capacity={capacity}, xi_s={xi_s_ms}ms) failed: {e}",
                        policy.label()
                    ))
                })?;
            Ok(CellReport {
                policy: policy.label(),
                capacity,
                xi_s_ms,
                report: outcome.report,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let baseline = config.baseline_label();
    if !cells.iter().any(|c| c.policy == baseline) {
        return Err(Error::InvalidConfig(format!(
            "baseline policy '{baseline}' is not in the grid"
        )));
    }

    let mut improvements = Vec::new();
    for cell in &cells {
        let base = cells
            .iter()
            .find(|c| {
                c.policy == baseline && c.capacity == cell.capacity && c.xi_s_ms == cell.xi_s_ms
            })
            .expect("baseline cell exists for every (capacity, threshold)");
        let pct = |b: f64, v: f64| relative_improvement(b, v).unwrap_or(0.0);
        let slo_improvement = base
            .report
            .slo
            .first()
            .zip(cell.report.slo.first())
            .and_then(|(b, v)| {
                relative_improvement(b.violation_count as f64, v.violation_count as f64).ok()
            });
        improvements.push(ImprovementCell {
            policy: cell.policy.clone(),
            capacity: cell.capacity,
            xi_s_ms: cell.xi_s_ms,
            p50_improvement_pct: pct(base.report.p50_ms, cell.report.p50_ms),
            p90_improvement_pct: pct(base.report.p90_ms, cell.report.p90_ms),
            p95_improvement_pct: pct(base.report.p95_ms, cell.report.p95_ms),
            p99_improvement_pct: pct(base.report.p99_ms, cell.report.p99_ms),
            tel_improvement_pct: pct(base.report.tel_ms, cell.report.tel_ms),
            slo_violation_improvement_pct: slo_improvement,
        });
    }

    Ok(ComparisonTable {
        baseline,
        cells,
        improvements,
    })
}

/// Serialize a comparison table as CSV: one row per (policy, capacity,
/// xi_s), fixed column order and float formatting so identical runs produce
/// byte-identical output.
pub fn write_comparison_csv<W: Write>(table: &ComparisonTable, mut writer: W) -> Result<()> {
    write!(writer, "policy,capacity,xi_s_ms,n,tel_blocks,tel_ms,mean,p50,p90,p95,p99")?;
    let slo_columns: Vec<f64> = table
        .cells
        .first()
        .map(|c| c.report.slo.iter().map(|s| s.slo_ms).collect())
        .unwrap_or_default();
    for slo in &slo_columns {
        write!(writer, ",slo{slo:.0}_count,slo{slo:.0}_rate")?;
    }
    writeln!(writer)?;

    for cell in &table.cells {
        let r = &cell.report;
        write!(
            writer,
            "{},{},{:.3},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            cell.policy,
            cell.capacity,
            cell.xi_s_ms,
            r.count,
            r.tel_blocks,
            r.tel_ms,
            r.mean_ttft_ms,
            r.p50_ms,
            r.p90_ms,
            r.p95_ms,
            r.p99_ms
        )?;
        for slo in &r.slo {
            write!(writer, ",{},{:.6}", slo.violation_count, slo.violation_rate)?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

/// Serialize improvement cells as CSV with percentages to one decimal.
pub fn write_improvement_csv<W: Write>(table: &ComparisonTable, mut writer: W) -> Result<()> {
    writeln!(
        writer,
        "policy,capacity,xi_s_ms,p50_improvement,p90_improvement,p95_improvement,p99_improvement,tel_improvement,slo_violation_improvement"
    )?;
    for cell in &table.improvements {
        writeln!(
            writer,
            "{},{},{:.3},{:.1},{:.1},{:.1},{:.1},{:.1},{}",
            cell.policy,
            cell.capacity,
            cell.xi_s_ms,
            cell.p50_improvement_pct,
            cell.p90_improvement_pct,
            cell.p95_improvement_pct,
            cell.p99_improvement_pct,
            cell.tel_improvement_pct,
            cell.slo_violation_improvement_pct
                .map_or("n/a".to_string(), |v| format!("{v:.1}"))
        )?;
    }
    Ok(())
}

/// Serialize per-request records as CSV.
pub fn write_records_csv<W: Write>(records: &[RequestRecord], mut writer: W) -> Result<()> {
    writeln!(
        writer,
        "conversation_id,timestamp,uncached_blocks,cached_blocks_used,ttft_ms"
    )?;
    for r in records {
        writeln!(
            writer,
            "{},{:.6},{},{},{:.3}",
            r.conversation_id, r.timestamp, r.uncached_blocks, r.cached_blocks_used, r.ttft_ms
        )?;
    }
    Ok(())
}

/// One instance where policy replay and exhaustive optimum disagreed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMismatch {
    pub instance: HindsightInstance,
    pub mode: CachingMode,
    pub replay_tel_blocks: u64,
    pub oracle_tel_blocks: u64,
}

/// Outcome of an oracle certification run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub instances_run: usize,
    pub forced_instances_run: usize,
    pub mismatches: Vec<OracleMismatch>,
}

impl OracleCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Replay a micro-instance under the clairvoyant tail-optimized policy and
/// return its TEL in blocks.
pub fn replay_instance_tel(
    instance: &HindsightInstance,
    mode: CachingMode,
) -> Result<u64> {
    let trace = instance.to_trace();
    let mut policy = PolicyConfig::new(PolicyFamily::TailBelady(
        crate::policy::TailBeladyParams {
            xi_blocks: instance.xi_blocks,
        },
    ));
    policy.caching_mode = mode;
    let model = LatencyModel::default();
    let spec = ReportSpec {
        xi_s_ms: instance.xi_blocks as f64,
        slo_ms: vec![],
    };
    let outcome = replay(&trace, &policy, instance.capacity, &model, &spec)?;
    Ok(outcome.report.tel_blocks)
}

/// Generate `count` random micro-instances and compare the clairvoyant
/// policy's replay TEL against the exhaustive optimum, in optional mode and
/// (where feasible) forced mode. Mismatches are report content, not errors.
pub fn oracle_check(count: usize, bounds: &InstanceBounds, seed: u64) -> Result<OracleCheckReport> {
    bounds.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let instances: Vec<HindsightInstance> =
        (0..count).map(|_| random_instance(&mut rng, bounds)).collect();

    let results: Vec<(Option<OracleMismatch>, Option<OracleMismatch>, bool)> = instances
        .into_par_iter()
        .map(|instance| {
            let optional = check_one(&instance, CachingMode::Optional)?;
            let (forced, forced_ran) = if instance.forced_feasible() {
                (check_one(&instance, CachingMode::Forced)?, true)
            } else {
                (None, false)
            };
            Ok((optional, forced, forced_ran))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = OracleCheckReport {
        instances_run: count,
        forced_instances_run: 0,
        mismatches: Vec::new(),
    };
    for (optional, forced, forced_ran) in results {
        report.mismatches.extend(optional);
        report.mismatches.extend(forced);
        report.forced_instances_run += forced_ran as usize;
    }
    Ok(report)
}

fn check_one(instance: &HindsightInstance, mode: CachingMode) -> Result<Option<OracleMismatch>> {
    let solution = solve_hindsight_tel(instance, mode)?;
    let replay_tel = replay_instance_tel(instance, mode)?;
    Ok((replay_tel != solution.optimal_tel_blocks).then(|| OracleMismatch {
        instance: instance.clone(),
        mode,
        replay_tel_blocks: replay_tel,
        oracle_tel_blocks: solution.optimal_tel_blocks,
    }))
}

/// Paired Monte-Carlo comparison of policies on the synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub params: SyntheticParams,
    /// First policy is the reference all others are paired against.
    pub policies: Vec<PolicyConfig>,
    pub capacity: u64,
    pub xi_blocks: u64,
    pub runs: usize,
}

/// Paired difference of mean TEL between the reference policy and one
/// comparator: negative means the reference is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub comparator: String,
    pub mean_diff_blocks: f64,
    pub std_error: f64,
    pub ci95_lower: f64,
    pub ci95_upper: f64,
}

impl PairedDifference {
    /// True when the 95% interval excludes the wrong sign, i.e. the
    /// reference policy's mean TEL is no worse than the comparator's.
    pub fn reference_no_worse(&self) -> bool {
        self.ci95_upper <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub reference: String,
    pub runs: usize,
    pub mean_tel_blocks: Vec<(String, f64)>,
    pub paired: Vec<PairedDifference>,
}

/// Replay `runs` seeded synthetic traces under every policy and report
/// paired mean-TEL differences of the first (reference) policy against each
/// other policy, with 95% confidence intervals.
pub fn monte_carlo_policy_test(config: &McConfig) -> Result<McReport> {
    if config.policies.len() < 2 {
        return Err(Error::InvalidConfig(
            "monte carlo test needs a reference and at least one comparator".into(),
        ));
    }
    if config.runs == 0 {
        return Err(Error::InvalidConfig("runs must be >= 1".into()));
    }
    config.params.validate()?;

    let policies: Vec<PolicyConfig> = config
        .policies
        .iter()
        .map(|p| p.clone().with_xi_blocks(config.xi_blocks))
        .collect();
    let model = LatencyModel::default();
    let spec = ReportSpec {
        xi_s_ms: config.xi_blocks as f64,
        slo_ms: vec![],
    };

    // tels[k][p] = TEL of policy p on seed k.
    let tels: Vec<Vec<u64>> = (0..config.runs)
        .into_par_iter()
        .map(|k| {
            let mut params = config.params.clone();
            params.seed = config.params.seed.wrapping_add(k as u64);
            let trace = generate_synthetic(&params)?;
            policies
                .iter()
                .map(|policy| {
                    let outcome = replay(&trace, policy, config.capacity, &model, &spec)?;
                    Ok(outcome.report.tel_blocks)
                })
                .collect::<Result<Vec<u64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let runs = config.runs as f64;
    let mean_tel_blocks: Vec<(String, f64)> = policies
        .iter()
        .enumerate()
        .map(|(p, policy)| {
            let total: f64 = tels.iter().map(|row| row[p] as f64).sum();
            (policy.label(), total / runs)
        })
        .collect();

    let paired = policies
        .iter()
        .enumerate()
        .skip(1)
        .map(|(p, policy)| {
            let diffs: Vec<f64> = tels
                .iter()
                .map(|row| row[0] as f64 - row[p] as f64)
                .collect();
            let mean = diffs.iter().sum::<f64>() / runs;
            let variance = if diffs.len() > 1 {
                diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (runs - 1.0)
            } else {
                0.0
            };
            let std_error = (variance / runs).sqrt();
            PairedDifference {
                comparator: policy.label(),
                mean_diff_blocks: mean,
                std_error,
                ci95_lower: mean - 1.96 * std_error,
                ci95_upper: mean + 1.96 * std_error,
            }
        })
        .collect();

    Ok(McReport {
        reference: policies[0].label(),
        runs: config.runs,
        mean_tel_blocks,
        paired,
    })
}
