//! Per-request SLA outcomes and aggregate report computation.
//!
//! Everything here is pure post-processing: outcomes are derived from the
//! event log alone, memory statistics from the per-iteration samples the
//! engine collected, so any report can be recomputed offline from the
//! exported artifacts.

use crate::engine::{Event, EventKind, EventLog};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("event log integrity: {0}")]
    Integrity(String),
    #[error("event log incomplete: request {0} has no finish event")]
    IncompleteLog(u64),
    #[error("makespan must be positive, got {0}")]
    NonPositiveMakespan(f64),
    #[error("memory timeline has no samples")]
    EmptySamples,
}

/// Per-request latency limits. A request meets its SLA iff both
/// `ttft < ttft_limit` and `mtpot < mtpot_limit` (strict comparisons).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlaThresholds {
    pub ttft_limit: f64,
    pub mtpot_limit: f64,
}

impl Default for SlaThresholds {
    fn default() -> Self {
        Self {
            ttft_limit: 10.0,
            mtpot_limit: 1.5,
        }
    }
}

/// SLA outcome of a single request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestOutcome {
    pub request_id: u64,
    /// Arrival to first token; `None` when the request never produced one.
    pub ttft: Option<f64>,
    /// Successive inter-token gaps, including gaps spanning evictions.
    pub tpots: Vec<f64>,
    /// Maximum inter-token gap; 0 when fewer than two tokens were emitted.
    pub mtpot: f64,
    /// Tokens the request emitted.
    pub tokens: u64,
    pub evictions: u32,
    pub finished_at: f64,
    pub sla_met: bool,
}

/// Compute per-request outcomes from a complete event log.
pub fn compute_outcomes(
    log: &EventLog,
    sla: &SlaThresholds,
) -> Result<Vec<RequestOutcome>, MetricsError> {
    #[derive(Default)]
    struct Acc {
        arrive: Option<f64>,
        tokens: Vec<f64>,
        finish: Option<f64>,
        evictions: u32,
    }
    let mut accs: BTreeMap<u64, Acc> = BTreeMap::new();
    for Event {
        time,
        kind,
        request_id,
        ..
    } in &log.events
    {
        match kind {
            EventKind::Arrive => {
                let acc = accs.entry(*request_id).or_default();
                if acc.arrive.is_some() {
                    return Err(MetricsError::Integrity(format!(
                        "request {request_id} arrived twice"
                    )));
                }
                acc.arrive = Some(*time);
            }
            _ => {
                let acc = accs.get_mut(request_id).ok_or_else(|| {
                    MetricsError::Integrity(format!(
                        "request {request_id} has a {kind:?} event before arriving"
                    ))
                })?;
                match kind {
                    EventKind::Token => acc.tokens.push(*time),
                    EventKind::Finish => acc.finish = Some(*time),
                    EventKind::Evict => acc.evictions += 1,
                    EventKind::Admit | EventKind::PrefillDone => {}
                    EventKind::Arrive => unreachable!(),
                }
            }
        }
    }

    let mut outcomes = Vec::with_capacity(accs.len());
    for (request_id, acc) in accs {
        let arrive = acc
            .arrive
            .expect("entries are only created by arrive events");
        let finished_at = acc.finish.ok_or(MetricsError::IncompleteLog(request_id))?;
        let ttft = acc.tokens.first().map(|t| t - arrive);
        let tpots: Vec<f64> = acc.tokens.windows(2).map(|w| w[1] - w[0]).collect();
        let mtpot = tpots.iter().copied().fold(0.0f64, f64::max);
        let sla_met = ttft.is_some_and(|t| t < sla.ttft_limit) && mtpot < sla.mtpot_limit;
        outcomes.push(RequestOutcome {
            request_id,
            ttft,
            mtpot,
            tokens: acc.tokens.len() as u64,
            tpots,
            evictions: acc.evictions,
            finished_at,
            sla_met,
        });
    }
    Ok(outcomes)
}

/// Token rates over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Goodput {
    /// Tokens/second counting SLA-meeting requests only.
    pub goodput: f64,
    /// Tokens/second over all requests.
    pub throughput: f64,
    /// SLA-meeting requests per second.
    pub goodput_rps: f64,
}

pub fn compute_goodput(
    outcomes: &[RequestOutcome],
    makespan: f64,
) -> Result<Goodput, MetricsError> {
    if !makespan.is_finite() || makespan <= 0.0 {
        return Err(MetricsError::NonPositiveMakespan(makespan));
    }
    let good_tokens: u64 = outcomes
        .iter()
        .filter(|o| o.sla_met)
        .map(|o| o.tokens)
        .sum();
    let all_tokens: u64 = outcomes.iter().map(|o| o.tokens).sum();
    let good_reqs = outcomes.iter().filter(|o| o.sla_met).count();
    Ok(Goodput {
        goodput: good_tokens as f64 / makespan,
        throughput: all_tokens as f64 / makespan,
        goodput_rps: good_reqs as f64 / makespan,
    })
}

/// One per-iteration memory observation, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemorySample {
    /// Resident tokens after admission.
    pub consumed: u64,
    /// Peak future demand of the running batch computed with true remaining
    /// lengths (measurement is independent of scheduler predictions).
    pub future_required: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryStats {
    pub avg_consumed_pct: f64,
    pub avg_future_required_pct: f64,
    pub max_future_required_pct: f64,
}

/// Average (and peak) memory fractions over the sampled timeline; values
/// above 1.0 mean the scheduler admitted more future demand than capacity.
pub fn memory_timeline_stats(
    samples: &[MemorySample],
    capacity: u64,
) -> Result<MemoryStats, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let n = samples.len() as f64;
    let cap = capacity as f64;
    let avg_consumed = samples.iter().map(|s| s.consumed as f64 / cap).sum::<f64>() / n;
    let avg_future = samples
        .iter()
        .map(|s| s.future_required as f64 / cap)
        .sum::<f64>()
        / n;
    let max_future = samples
        .iter()
        .map(|s| s.future_required as f64 / cap)
        .fold(0.0f64, f64::max);
    Ok(MemoryStats {
        avg_consumed_pct: avg_consumed,
        avg_future_required_pct: avg_future,
        max_future_required_pct: max_future,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlaViolations {
    pub ttft_violations: u64,
    pub mtpot_violations: u64,
}

/// Aggregate report for one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub goodput: f64,
    pub goodput_rps: f64,
    pub throughput: f64,
    pub decoding_steps: u64,
    pub avg_consumed_pct: f64,
    pub avg_future_required_pct: f64,
    pub max_future_required_pct: f64,
    /// Eviction events over total requests; above 1.0 means requests were
    /// evicted more than once on average.
    pub evicted_reqs_pct: f64,
    pub sla_met_fraction: f64,
    pub p99_ttft: Option<f64>,
    pub p99_mtpot: f64,
    pub sla_violations: SlaViolations,
    /// Requests that could never fit under the policy and were dropped.
    pub unschedulable: u64,
    /// Requests force-finished because they could not grow any further.
    pub truncated: u64,
    pub makespan: f64,
    pub total_requests: u64,
    pub total_evictions: u64,
    pub outcomes: Vec<RequestOutcome>,
}

impl MetricsReport {
    pub const SUMMARY_CSV_HEADER: &'static str = "scheduler,params,dataset,clients,seed,decoding_steps,avg_consumed_pct,avg_future_required_pct,evicted_reqs_pct,goodput,throughput";

    /// One comparison-table row with stable formatting.
    pub fn summary_csv_row(
        &self,
        scheduler: &str,
        params: &str,
        dataset: &str,
        clients: usize,
        seed: u64,
    ) -> String {
        format!(
            "{scheduler},{params},{dataset},{clients},{seed},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.decoding_steps,
            self.avg_consumed_pct,
            self.avg_future_required_pct,
            self.evicted_reqs_pct,
            self.goodput,
            self.throughput
        )
    }
}

/// p99 by the nearest-rank method; `None` on an empty set.
pub fn p99(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
    let rank = ((0.99 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}
