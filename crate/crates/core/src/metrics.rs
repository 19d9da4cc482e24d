//! Latency model and aggregation: modeled TTFT, tail excess latency,
//! percentiles, SLO violations, and KV-cache byte sizing.
//!
//! TTFT is modeled as linear in the number of uncached blocks. The
//! coefficient `alpha` is a configuration input; the documented calibration
//! recipe is an ordinary least-squares fit of measured TTFT against uncached
//! tokens on the target hardware. The simulator itself never measures
//! wall-clock time, and every report is tagged accordingly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::ConversationId;

/// Marker placed in report metadata: all TTFT values are modeled.
pub const TTFT_SOURCE: &str = "modeled_linear_alpha";

/// Linear TTFT model: `ttft_ms = alpha_ms_per_block * uncached_blocks`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub alpha_ms_per_block: f64,
    pub block_size: u32,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            alpha_ms_per_block: 1.0,
            block_size: 1,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha_ms_per_block.is_finite() || self.alpha_ms_per_block <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha_ms_per_block must be positive, got {}",
                self.alpha_ms_per_block
            )));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Convert a latency threshold in milliseconds to whole blocks,
    /// rounding to the nearest integer block.
    pub fn ms_to_blocks(&self, ms: f64) -> u64 {
        (ms / self.alpha_ms_per_block).round().max(0.0) as u64
    }
}

/// Modeled time to first token for a request with this many uncached blocks.
pub fn ttft(uncached_blocks: u64, model: &LatencyModel) -> f64 {
    model.alpha_ms_per_block * uncached_blocks as f64
}

/// One served request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub conversation_id: ConversationId,
    pub timestamp: f64,
    pub uncached_blocks: u64,
    pub cached_blocks_used: u64,
    pub ttft_ms: f64,
}

/// Tail excess latency in milliseconds: total TTFT above the threshold,
/// clipped at zero per request.
pub fn tel(records: &[RequestRecord], xi_ms: f64) -> f64 {
    records
        .iter()
        .map(|r| (r.ttft_ms - xi_ms).max(0.0))
        .sum()
}

/// Tail excess latency in blocks against an integer block threshold.
/// Integer-exact, for comparisons against the hindsight oracle.
pub fn tel_blocks(uncached: impl IntoIterator<Item = u64>, xi_blocks: u64) -> u64 {
    uncached
        .into_iter()
        .map(|b| b.saturating_sub(xi_blocks))
        .sum()
}

/// Nearest-rank percentile: sort ascending, take the element at 1-based rank
/// `ceil(p/100 * n)`. No interpolation.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile of empty list".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidConfig(format!(
            "percentile must lie in (0, 100], got {p}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p * sorted.len() as f64 / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Count of requests whose TTFT strictly exceeds the SLO. A request exactly
/// at the boundary counts as attained.
pub fn slo_violations(records: &[RequestRecord], slo_ms: f64) -> (usize, f64) {
    let count = records.iter().filter(|r| r.ttft_ms > slo_ms).count();
    let rate = if records.is_empty() {
        0.0
    } else {
        count as f64 / records.len() as f64
    };
    (count, rate)
}

/// Bytes of KV cache per token: `2 * layers * kv_heads * head_size *
/// bytes_per_value`, the factor 2 covering the key and value matrices.
pub fn kv_bytes_per_token(layers: u64, kv_heads: u64, head_size: u64, bytes_per_value: u64) -> u64 {
    2 * layers * kv_heads * head_size * bytes_per_value
}

/// Relative improvement of `variant` over `base`, in percent. Regressions
/// come out negative.
pub fn relative_improvement(base: f64, variant: f64) -> Result<f64> {
    if !base.is_finite() || base <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "relative improvement needs a positive base, got {base}"
        )));
    }
    Ok((base - variant) / base * 100.0)
}

/// Violation counts at one SLO threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloAttainment {
    pub slo_ms: f64,
    pub violation_count: usize,
    pub violation_rate: f64,
}

/// Aggregated view of one replay's request records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    /// Threshold the TEL figures were computed against.
    pub xi_s_ms: f64,
    pub xi_blocks: u64,
    pub tel_ms: f64,
    /// TEL in block units (TEL divided by alpha), integer-exact.
    pub tel_blocks: u64,
    pub mean_ttft_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ttft_ms: f64,
    pub slo: Vec<SloAttainment>,
    /// Provenance marker: TTFT here is modeled, never measured.
    pub ttft_source: String,
}

impl MetricsReport {
    /// Aggregate request records. `xi_s_ms` is the latency threshold in
    /// milliseconds; `xi_blocks` its block-unit counterpart used for the
    /// integer-exact TEL.
    pub fn from_records(
        records: &[RequestRecord],
        xi_s_ms: f64,
        xi_blocks: u64,
        slo_ms: &[f64],
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("metrics over empty record set".into()));
        }
        let ttfts: Vec<f64> = records.iter().map(|r| r.ttft_ms).collect();
        let slo = slo_ms
            .iter()
            .map(|&s| {
                let (violation_count, violation_rate) = slo_violations(records, s);
                SloAttainment {
                    slo_ms: s,
                    violation_count,
                    violation_rate,
                }
            })
            .collect();
        Ok(MetricsReport {
            count: records.len(),
            xi_s_ms,
            xi_blocks,
            tel_ms: tel(records, xi_s_ms),
            tel_blocks: tel_blocks(records.iter().map(|r| r.uncached_blocks), xi_blocks),
            mean_ttft_ms: ttfts.iter().sum::<f64>() / ttfts.len() as f64,
            p50_ms: percentile(&ttfts, 50.0)?,
            p90_ms: percentile(&ttfts, 90.0)?,
            p95_ms: percentile(&ttfts, 95.0)?,
            p99_ms: percentile(&ttfts, 99.0)?,
            max_ttft_ms: ttfts.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            slo,
            ttft_source: TTFT_SOURCE.to_string(),
        })
    }
}
