//! The continuous-batching simulation loop.
//!
//! The engine iterates discrete scheduling rounds. Each round, in order:
//! arrivals are enqueued, finished requests are retired (their actual output
//! lengths feeding the predictor window), the admission policy runs over the
//! FIFO queue, an overflow check evicts victims if the next decode step would
//! exceed capacity, and finally one decode step grows every running request
//! by one token while a parametric cost model advances the virtual clock.
//!
//! The whole run is deterministic: the same workload, policy, config, and
//! seed produce a byte-identical event log and report.

use crate::memory::{future_required_memory, BatchSnapshot, KVPool, MemoryError, SnapshotEntry};
use crate::metrics::{
    self, compute_goodput, compute_outcomes, memory_timeline_stats, MemorySample, MetricsError,
    MetricsReport, SlaThresholds,
};
use crate::predictor::{LengthPredictor, PredictorError};
use crate::sched::{self, ReqView, SchedError, SchedulerPolicy};
use crate::workload::{RequestSpec, WorkloadError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Consecutive empty-system scheduling passes tolerated before a sampled
/// prediction is replaced with the most favorable achievable one. Only the
/// Past-Future policy can reach this: nothing is running, so only resampling
/// can unblock the queue head, and an adversarial window could make that take
/// arbitrarily long.
const STALL_RETRY_LIMIT: u32 = 10_000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("workload is empty")]
    EmptyWorkload,
    #[error("capacity {capacity} cannot serve request {id} (needs at least {required} tokens)")]
    CapacityTooSmall {
        capacity: u64,
        id: u64,
        required: u64,
    },
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invariant violated at iteration {iteration}: {detail}")]
    InvariantViolation { iteration: u64, detail: String },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Latency coefficients driving the virtual clock, all in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    /// Prefill cost per prompt token.
    pub prefill_per_token: f64,
    /// Fixed cost per decode step.
    pub decode_base: f64,
    /// Additional decode cost per running request.
    pub decode_per_request: f64,
    /// Additional decode cost per resident token.
    pub decode_per_resident_token: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            prefill_per_token: 0.25e-3,
            decode_base: 10e-3,
            decode_per_request: 0.05e-3,
            decode_per_resident_token: 0.1e-6,
        }
    }
}

impl CostModel {
    fn validate(&self) -> Result<(), EngineError> {
        let coeffs = [
            self.prefill_per_token,
            self.decode_base,
            self.decode_per_request,
            self.decode_per_resident_token,
        ];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(EngineError::InvalidCostModel(
                "all coefficients must be finite and >= 0".into(),
            ));
        }
        if self.decode_base == 0.0
            && self.decode_per_request == 0.0
            && self.decode_per_resident_token == 0.0
        {
            return Err(EngineError::InvalidCostModel(
                "decode step time must be positive for a non-empty batch".into(),
            ));
        }
        Ok(())
    }
}

/// How requests are injected during the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ClientModel {
    /// `clients` concurrent clients; each issues its next workload entry the
    /// instant its previous one finishes.
    ClosedLoop { clients: usize },
    /// Replay the arrival times recorded in the workload.
    OpenLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    /// KV pool capacity in tokens.
    pub capacity: u64,
    pub cost: CostModel,
    pub sla: SlaThresholds,
    pub clients: ClientModel,
    pub seed: u64,
    /// Sample the memory timeline every this many iterations.
    pub sample_every: u64,
    /// Run the conservation checks after every iteration.
    pub check_invariants: bool,
}

impl SimConfig {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            cost: CostModel::default(),
            sla: SlaThresholds::default(),
            clients: ClientModel::ClosedLoop { clients: 16 },
            seed: 0,
            sample_every: 1,
            check_invariants: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrive,
    Admit,
    PrefillDone,
    Token,
    Finish,
    Evict,
}

/// One simulation event. `resident_tokens` is the pool occupancy right after
/// the event took effect, which makes the log auditable for conservation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub request_id: u64,
    pub resident_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    fn push(&mut self, event: Event) {
        debug_assert!(
            self.events
                .last()
                .is_none_or(|prev| prev.time <= event.time),
            "event log must be time-ordered"
        );
        self.events.push(event);
    }

    /// JSON-lines export, one event per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serialization cannot fail"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { events })
    }
}

/// Build a log from raw events (test fixtures, offline recomputation).
pub fn event_log_from(events: Vec<Event>) -> EventLog {
    EventLog { events }
}

/// Live state of an admitted request.
#[derive(Debug, Clone)]
pub struct RunningRequest {
    pub spec: RequestSpec,
    /// Tokens generated so far.
    pub generated: u32,
    /// Scheduler-assigned predicted total output length.
    pub predicted_total: u32,
    pub admitted_at: f64,
    pub evictions: u32,
    /// When this request was issued (closed-loop issue time or open-loop
    /// pickup time); TTFT is measured from here.
    pub issued_at: f64,
}

impl RunningRequest {
    pub fn resident_tokens(&self) -> u64 {
        u64::from(self.spec.input_len) + u64::from(self.generated)
    }

    fn view(&self) -> ReqView {
        ReqView {
            input_len: self.spec.input_len,
            generated: self.generated,
            max_new_tokens: self.spec.max_new_tokens,
            true_output_len: self.spec.true_output_len,
        }
    }

    fn finished(&self) -> bool {
        self.generated >= self.spec.true_output_len || self.generated >= self.spec.max_new_tokens
    }
}

/// Pure view of the engine state checked between iterations.
#[derive(Debug)]
pub struct EngineStateView<'a> {
    pub pool_used: u64,
    pub capacity: u64,
    /// Resident token counts of the running batch.
    pub batch_residents: &'a [u64],
    /// Predictor window contents, oldest first.
    pub window_entries: &'a [u32],
    /// What the window must contain given the startup fill and the recorded
    /// completions.
    pub expected_window: &'a [u32],
}

/// Conservation checks: pool accounting matches the batch exactly, stays
/// within capacity, and the predictor window holds exactly the startup fill
/// plus recorded completion lengths.
pub fn step_invariant_check(view: &EngineStateView) -> Result<(), String> {
    let batch_total: u64 = view.batch_residents.iter().sum();
    if view.pool_used != batch_total {
        return Err(format!(
            "pool.used {} != sum of batch residents {} (batch: {:?})",
            view.pool_used, batch_total, view.batch_residents
        ));
    }
    if view.pool_used > view.capacity {
        return Err(format!(
            "pool.used {} exceeds capacity {}",
            view.pool_used, view.capacity
        ));
    }
    if view.window_entries != view.expected_window {
        return Err(format!(
            "predictor window {:?} != expected {:?}",
            view.window_entries, view.expected_window
        ));
    }
    Ok(())
}

/// Result of a simulation run.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub log: EventLog,
    pub report: MetricsReport,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    clock: f64,
    pool: KVPool,
    queue: VecDeque<RunningRequest>,
    batch: Vec<RunningRequest>,
    predictor: LengthPredictor,
    rng: ChaCha8Rng,
    log: EventLog,
    samples: Vec<MemorySample>,
    decoding_steps: u64,
    total_evictions: u64,
    unschedulable: u64,
    truncated: u64,
    /// Completion lengths recorded into the predictor, for invariant checks.
    completions: Vec<u32>,
    startup_fill: u32,
    window_size: usize,
    stall_retries: u32,
    iteration: u64,
}

impl<'a> Sim<'a> {
    fn emit(&mut self, kind: EventKind, request_id: u64) {
        self.log.push(Event {
            time: self.clock,
            kind,
            request_id,
            resident_tokens: self.pool.used(),
        });
    }

    fn queue_views(&self) -> Vec<ReqView> {
        self.queue
            .iter()
            .map(|r| ReqView {
                input_len: r.spec.input_len,
                generated: r.generated,
                max_new_tokens: r.spec.max_new_tokens,
                true_output_len: r.spec.true_output_len,
            })
            .collect()
    }

    fn batch_views(&self) -> Vec<ReqView> {
        self.batch.iter().map(RunningRequest::view).collect()
    }

    /// Issue a request into the queue at the current clock.
    fn issue(&mut self, spec: RequestSpec) {
        let req = RunningRequest {
            spec,
            generated: 0,
            predicted_total: 0,
            admitted_at: 0.0,
            evictions: 0,
            issued_at: self.clock,
        };
        let id = req.spec.id;
        self.queue.push_back(req);
        self.emit(EventKind::Arrive, id);
    }

    /// Retire a request: free its tokens, feed the predictor, log the finish.
    fn finish(&mut self, req: &RunningRequest) -> Result<(), EngineError> {
        self.pool.release(req.resident_tokens())?;
        let recorded = req.generated.max(1);
        self.predictor.record_completion(recorded)?;
        self.completions.push(recorded);
        self.emit(EventKind::Finish, req.spec.id);
        Ok(())
    }

    /// Admit one request from the queue front with the given prediction:
    /// allocate, pay prefill, emit the first token if it has none yet.
    /// Returns false (leaving the queue untouched) when the allocation would
    /// overrun hard capacity.
    fn apply_admission(&mut self, predicted_total: u32) -> Result<bool, EngineError> {
        let front = self.queue.front().expect("caller checked queue");
        let fresh = front.generated == 0;
        let footprint =
            u64::from(front.spec.input_len) + u64::from(front.generated) + u64::from(fresh);
        if self.pool.used() + footprint > self.pool.capacity() {
            return Ok(false);
        }
        let mut req = self.queue.pop_front().expect("non-empty");
        let prefill_tokens = u64::from(req.spec.input_len) + u64::from(req.generated);
        self.emit(EventKind::Admit, req.spec.id);
        self.clock += self.cfg.cost.prefill_per_token * prefill_tokens as f64;
        self.pool.allocate(footprint)?;
        req.admitted_at = self.clock;
        req.predicted_total = predicted_total.max(req.generated);
        if fresh {
            // Prefill produces the first output token.
            req.generated = 1;
            req.predicted_total = req.predicted_total.max(1);
            self.emit(EventKind::PrefillDone, req.spec.id);
            self.emit(EventKind::Token, req.spec.id);
        } else {
            // Recomputation after an eviction; already-streamed tokens are
            // not re-emitted.
            self.emit(EventKind::PrefillDone, req.spec.id);
        }
        self.batch.push(req);
        Ok(true)
    }

    fn check_invariants(&self) -> Result<(), EngineError> {
        let residents: Vec<u64> = self
            .batch
            .iter()
            .map(RunningRequest::resident_tokens)
            .collect();
        let window: Vec<u32> = self.predictor.window().entries().collect();
        let mut expected: Vec<u32> = vec![self.startup_fill; self.window_size];
        expected.extend_from_slice(&self.completions);
        let expected = expected[expected.len() - self.window_size.min(expected.len())..].to_vec();
        step_invariant_check(&EngineStateView {
            pool_used: self.pool.used(),
            capacity: self.pool.capacity(),
            batch_residents: &residents,
            window_entries: &window,
            expected_window: &expected,
        })
        .map_err(|detail| EngineError::InvariantViolation {
            iteration: self.iteration,
            detail,
        })
    }
}

/// Simulate `workload` to completion under `policy` and return the event log
/// plus the aggregate report.
pub fn run(
    workload: &[RequestSpec],
    policy: &SchedulerPolicy,
    cfg: &SimConfig,
) -> Result<SimOutput, EngineError> {
    if workload.is_empty() {
        return Err(EngineError::EmptyWorkload);
    }
    policy.validate()?;
    cfg.cost.validate()?;
    if cfg.sample_every == 0 {
        return Err(EngineError::InvalidConfig(
            "sample_every must be >= 1".into(),
        ));
    }
    let mut startup_fill = 1u32;
    for spec in workload {
        spec.validate()?;
        let required = u64::from(spec.input_len) + 1;
        if required > cfg.capacity {
            return Err(EngineError::CapacityTooSmall {
                capacity: cfg.capacity,
                id: spec.id,
                required,
            });
        }
        startup_fill = startup_fill.max(spec.max_new_tokens);
    }
    let window_size = match policy {
        SchedulerPolicy::PastFuture { prediction, .. } => prediction.window_size,
        _ => 1000,
    };

    let mut sim = Sim {
        cfg,
        clock: 0.0,
        pool: KVPool::new(cfg.capacity),
        queue: VecDeque::new(),
        batch: Vec::new(),
        predictor: LengthPredictor::with_startup(window_size, startup_fill),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        log: EventLog::default(),
        samples: Vec::new(),
        decoding_steps: 0,
        total_evictions: 0,
        unschedulable: 0,
        truncated: 0,
        completions: Vec::new(),
        startup_fill,
        window_size,
        stall_retries: 0,
        iteration: 0,
    };

    // Open loop replays recorded arrival times; closed loop issues the first
    // `clients` entries immediately and the rest as predecessors finish.
    let mut pending: VecDeque<RequestSpec> = match cfg.clients {
        ClientModel::OpenLoop => {
            let mut sorted = workload.to_vec();
            sorted.sort_by(|a, b| {
                a.arrival_time
                    .partial_cmp(&b.arrival_time)
                    .expect("finite arrivals")
                    .then(a.id.cmp(&b.id))
            });
            sorted.into()
        }
        ClientModel::ClosedLoop { clients } => {
            if clients == 0 {
                return Err(EngineError::InvalidConfig("clients must be >= 1".into()));
            }
            let mut pending: VecDeque<RequestSpec> = workload.to_vec().into();
            for _ in 0..clients.min(pending.len()) {
                let spec = pending.pop_front().expect("non-empty");
                sim.issue(spec);
            }
            pending
        }
    };
    let closed_loop = matches!(cfg.clients, ClientModel::ClosedLoop { .. });

    loop {
        sim.iteration += 1;

        // (1) Arrivals. In open loop, pull everything whose arrival time has
        // passed; when the system is idle, skip the clock forward to the
        // next arrival.
        if !closed_loop {
            if sim.batch.is_empty() && sim.queue.is_empty() {
                if let Some(front) = pending.front() {
                    sim.clock = sim.clock.max(front.arrival_time);
                }
            }
            while pending
                .front()
                .is_some_and(|spec| spec.arrival_time <= sim.clock)
            {
                let spec = pending.pop_front().expect("non-empty");
                sim.issue(spec);
            }
        }

        // (2) Completions: retire requests that produced their full output,
        // record their actual lengths, free their memory. Closed-loop
        // clients immediately issue their next request.
        let mut idx = 0;
        while idx < sim.batch.len() {
            if sim.batch[idx].finished() {
                let req = sim.batch.remove(idx);
                sim.finish(&req)?;
                if closed_loop {
                    if let Some(spec) = pending.pop_front() {
                        sim.issue(spec);
                    }
                }
            } else {
                idx += 1;
            }
        }

        if sim.batch.is_empty() && sim.queue.is_empty() && pending.is_empty() {
            break;
        }

        // (3) Admission.
        if !sim.queue.is_empty() {
            let decision = sched::admit(
                policy,
                &sim.queue_views(),
                &sim.batch_views(),
                &sim.pool,
                &sim.predictor,
                &mut sim.rng,
            )?;
            if let Some(preds) = &decision.running_predictions {
                for (req, &pred) in sim.batch.iter_mut().zip(preds) {
                    req.predicted_total = pred.max(req.generated);
                }
            }
            let mut admitted_any = false;
            for &pred in &decision.admitted_predictions {
                if !sim.apply_admission(pred)? {
                    break;
                }
                admitted_any = true;
            }

            // Stall handling: the batch is empty and the head was not
            // admitted, so no decode can run and no completion can ever
            // change the picture. Deterministic policies rejecting here mean
            // the head can never fit; Past-Future may just have sampled an
            // unlucky prediction, so it gets bounded retries before the most
            // favorable achievable prediction is applied.
            if !admitted_any && sim.batch.is_empty() {
                let head = sim.queue.front().expect("queue checked non-empty");
                let head_view = ReqView {
                    input_len: head.spec.input_len,
                    generated: head.generated,
                    max_new_tokens: head.spec.max_new_tokens,
                    true_output_len: head.spec.true_output_len,
                };
                if !sched::admissible_alone(policy, &head_view, cfg.capacity, &sim.predictor) {
                    let req = sim.queue.pop_front().expect("non-empty");
                    sim.unschedulable += 1;
                    sim.stall_retries = 0;
                    sim.emit(EventKind::Finish, req.spec.id);
                    if closed_loop {
                        if let Some(spec) = pending.pop_front() {
                            sim.issue(spec);
                        }
                    }
                } else {
                    sim.stall_retries += 1;
                    if sim.stall_retries > STALL_RETRY_LIMIT {
                        let pred_min = sim
                            .predictor
                            .window()
                            .counts()
                            .keys()
                            .next()
                            .copied()
                            .unwrap_or(head_view.max_new_tokens)
                            .clamp(
                                head_view.generated + 1,
                                head_view.max_new_tokens.max(head_view.generated + 1),
                            );
                        sim.apply_admission(pred_min)?;
                        sim.stall_retries = 0;
                    }
                }
            } else {
                sim.stall_retries = 0;
            }
        }

        // (3.5) Memory timeline sample: consumption after admission plus the
        // batch's true future peak (measured with ground-truth lengths,
        // independent of any prediction).
        if !sim.batch.is_empty() && sim.iteration.is_multiple_of(cfg.sample_every) {
            let snapshot: BatchSnapshot = sim
                .batch
                .iter()
                .map(|r| {
                    SnapshotEntry::new(
                        r.spec.input_len,
                        r.generated,
                        r.spec.true_output_len.max(r.generated),
                    )
                })
                .collect();
            sim.samples.push(MemorySample {
                consumed: sim.pool.used(),
                future_required: future_required_memory(&snapshot)?,
            });
        }

        // (4) Overflow check: evict if the next decode step would exceed
        // capacity. Victims re-queue at the front with their generated
        // tokens preserved. Requests that already produced their full output
        // this iteration (awaiting retirement) do not grow.
        let growers = sim.batch.iter().filter(|r| !r.finished()).count() as u64;
        if growers > 0 {
            let demand = sim.pool.used() + growers;
            if demand > cfg.capacity {
                let deficit = demand - cfg.capacity;
                let footprints: Vec<u64> = sim
                    .batch
                    .iter()
                    .map(RunningRequest::resident_tokens)
                    .collect();
                let victims = sched::select_eviction_victims(&footprints, deficit)?;
                for &idx in &victims {
                    // Victims come newest-first, so indices stay valid while
                    // removing and re-queued requests keep admission order.
                    let mut req = sim.batch.remove(idx);
                    sim.pool.release(req.resident_tokens())?;
                    req.evictions += 1;
                    sim.total_evictions += 1;
                    sim.emit(EventKind::Evict, req.spec.id);
                    sim.queue.push_front(req);
                }
                // A sole survivor that still cannot grow is truncated: it
                // ends at its current length rather than wedging the run.
                if sim.batch.len() == 1
                    && !sim.batch[0].finished()
                    && sim.pool.used() + 1 > cfg.capacity
                {
                    let req = sim.batch.remove(0);
                    sim.truncated += 1;
                    sim.finish(&req)?;
                    if closed_loop {
                        if let Some(spec) = pending.pop_front() {
                            sim.issue(spec);
                        }
                    }
                }
            }
        }

        // (5) Decode step: one token per unfinished running request.
        let growers = sim.batch.iter().filter(|r| !r.finished()).count() as u64;
        if growers > 0 {
            let step = cfg.cost.decode_base
                + cfg.cost.decode_per_request * growers as f64
                + cfg.cost.decode_per_resident_token * sim.pool.used() as f64;
            sim.clock += step;
            sim.decoding_steps += 1;
            for i in 0..sim.batch.len() {
                if sim.batch[i].finished() {
                    continue;
                }
                sim.batch[i].generated += 1;
                sim.pool.allocate(1)?;
                let id = sim.batch[i].spec.id;
                sim.emit(EventKind::Token, id);
            }
        }

        if cfg.check_invariants {
            sim.check_invariants()?;
        }
    }

    let outcomes = compute_outcomes(&sim.log, &cfg.sla)?;
    let makespan = sim.clock;
    let rates = if makespan > 0.0 {
        compute_goodput(&outcomes, makespan)?
    } else {
        metrics::Goodput {
            goodput: 0.0,
            throughput: 0.0,
            goodput_rps: 0.0,
        }
    };
    let mem = if sim.samples.is_empty() {
        metrics::MemoryStats {
            avg_consumed_pct: 0.0,
            avg_future_required_pct: 0.0,
            max_future_required_pct: 0.0,
        }
    } else {
        memory_timeline_stats(&sim.samples, cfg.capacity)?
    };
    let total_requests = workload.len() as u64;
    let ttft_violations = outcomes
        .iter()
        .filter(|o| !o.ttft.is_some_and(|t| t < cfg.sla.ttft_limit))
        .count() as u64;
    let mtpot_violations = outcomes
        .iter()
        .filter(|o| o.mtpot >= cfg.sla.mtpot_limit)
        .count() as u64;
    let sla_met = outcomes.iter().filter(|o| o.sla_met).count();
    let report = MetricsReport {
        goodput: rates.goodput,
        goodput_rps: rates.goodput_rps,
        throughput: rates.throughput,
        decoding_steps: sim.decoding_steps,
        avg_consumed_pct: mem.avg_consumed_pct,
        avg_future_required_pct: mem.avg_future_required_pct,
        max_future_required_pct: mem.max_future_required_pct,
        evicted_reqs_pct: sim.total_evictions as f64 / total_requests as f64,
        sla_met_fraction: sla_met as f64 / total_requests as f64,
        p99_ttft: metrics::p99(outcomes.iter().filter_map(|o| o.ttft)),
        p99_mtpot: metrics::p99(outcomes.iter().map(|o| o.mtpot)).unwrap_or(0.0),
        sla_violations: metrics::SlaViolations {
            ttft_violations,
            mtpot_violations,
        },
        unschedulable: sim.unschedulable,
        truncated: sim.truncated,
        makespan,
        total_requests,
        total_evictions: sim.total_evictions,
        outcomes,
    };
    Ok(SimOutput {
        log: sim.log,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{gen_uniform_workload, ArrivalModel, WorkloadConfig};

    fn unit_cost() -> CostModel {
        CostModel {
            prefill_per_token: 1.0,
            decode_base: 1.0,
            decode_per_request: 0.0,
            decode_per_resident_token: 0.0,
        }
    }

    fn spec(id: u64, input: u32, true_out: u32, max_new: u32) -> RequestSpec {
        RequestSpec {
            id,
            arrival_time: 0.0,
            input_len: input,
            true_output_len: true_out,
            max_new_tokens: max_new,
        }
    }

    fn base_cfg(capacity: u64) -> SimConfig {
        SimConfig {
            capacity,
            cost: unit_cost(),
            sla: SlaThresholds::default(),
            clients: ClientModel::ClosedLoop { clients: 64 },
            seed: 0,
            sample_every: 1,
            check_invariants: true,
        }
    }

    #[test]
    fn single_request_walkthrough() {
        // input=4, true_out=3: prefill emits the first token, two decode
        // steps emit the rest; the decoding-steps metric counts only the two
        // decode iterations and nothing is ever evicted.
        let out = run(
            &[spec(0, 4, 3, 10)],
            &SchedulerPolicy::Aggressive { watermark: 1.0 },
            &base_cfg(100),
        )
        .unwrap();
        assert_eq!(out.report.decoding_steps, 2);
        assert_eq!(out.report.total_evictions, 0);
        let kinds: Vec<EventKind> = out.log.events.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                EventKind::Arrive,
                EventKind::Admit,
                EventKind::PrefillDone,
                EventKind::Token,
                EventKind::Token,
                EventKind::Token,
                EventKind::Finish,
            ]
        );
        let times: Vec<f64> = out.log.events.iter().map(|e| e.time).collect();
        assert_eq!(times, vec![0.0, 0.0, 4.0, 4.0, 5.0, 6.0, 6.0]);
        assert_eq!(out.report.outcomes[0].ttft, Some(4.0));
        assert_eq!(out.report.outcomes[0].tpots, vec![1.0, 1.0]);
        assert_eq!(out.report.outcomes[0].tokens, 3);
    }

    #[test]
    fn emitted_tokens_match_true_lengths() {
        let workload: Vec<RequestSpec> = (0..40)
            .map(|i| spec(i, 3 + (i as u32 % 5), 1 + (i as u32 % 7), 16))
            .collect();
        let out = run(
            &workload,
            &SchedulerPolicy::Aggressive { watermark: 0.95 },
            &base_cfg(64),
        )
        .unwrap();
        for o in &out.report.outcomes {
            let spec = &workload[o.request_id as usize];
            assert_eq!(
                o.tokens,
                u64::from(spec.true_output_len),
                "request {}",
                o.request_id
            );
        }
        let total: u64 = out.report.outcomes.iter().map(|o| o.tokens).sum();
        let expected: u64 = workload.iter().map(|s| u64::from(s.true_output_len)).sum();
        assert_eq!(total, expected);
    }

    #[test]
    fn deterministic_event_logs() {
        let workload = gen_uniform_workload(&WorkloadConfig {
            count: 120,
            input_range: (2, 40),
            output_range: (1, 30),
            max_new_tokens: 32,
            seed: 5,
            arrival: ArrivalModel::ClosedLoop { clients: 1 },
        })
        .unwrap();
        let policy = SchedulerPolicy::past_future(0.05);
        let cfg = base_cfg(256);
        let a = run(&workload, &policy, &cfg).unwrap();
        let b = run(&workload, &policy, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.report, b.report);
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    }

    #[test]
    fn event_times_are_non_decreasing() {
        let workload = gen_uniform_workload(&WorkloadConfig {
            count: 100,
            input_range: (2, 30),
            output_range: (1, 40),
            max_new_tokens: 64,
            seed: 9,
            arrival: ArrivalModel::OpenLoop { rate: 3.0 },
        })
        .unwrap();
        let mut cfg = base_cfg(200);
        cfg.clients = ClientModel::OpenLoop;
        let out = run(
            &workload,
            &SchedulerPolicy::Aggressive { watermark: 0.9 },
            &cfg,
        )
        .unwrap();
        for w in out.log.events.windows(2) {
            assert!(w[0].time <= w[1].time);
        }
    }

    #[test]
    fn closed_loop_keeps_at_most_n_clients_outstanding() {
        let workload: Vec<RequestSpec> = (0..30).map(|i| spec(i, 2, 3, 8)).collect();
        let mut cfg = base_cfg(1000);
        cfg.clients = ClientModel::ClosedLoop { clients: 4 };
        let out = run(&workload, &SchedulerPolicy::Oracle, &cfg).unwrap();
        // Replay the log and track outstanding (arrived, unfinished).
        let mut outstanding = 0i64;
        for e in &out.log.events {
            match e.kind {
                EventKind::Arrive => outstanding += 1,
                EventKind::Finish => outstanding -= 1,
                _ => {}
            }
            assert!(
                outstanding <= 4,
                "outstanding {outstanding} exceeds clients"
            );
        }
        assert_eq!(outstanding, 0);
    }

    #[test]
    fn eviction_requeues_and_resumes_without_duplicate_tokens() {
        // Two identical requests against a tight pool: the newest is evicted
        // at the overflow step, re-queued, re-prefilled, and finishes with
        // exactly its true output length.
        let workload = vec![spec(0, 6, 7, 9), spec(1, 6, 7, 9)];
        let mut cfg = base_cfg(21);
        cfg.clients = ClientModel::ClosedLoop { clients: 2 };
        let out = run(
            &workload,
            &SchedulerPolicy::Aggressive { watermark: 0.95 },
            &cfg,
        )
        .unwrap();
        assert_eq!(out.report.total_evictions, 1);
        let evicted: Vec<u64> = out
            .log
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Evict)
            .map(|e| e.request_id)
            .collect();
        assert_eq!(evicted, vec![1], "LIFO picks the newest request");
        for o in &out.report.outcomes {
            assert_eq!(o.tokens, 7);
        }
        assert_eq!(out.report.outcomes[1].evictions, 1);
        // The eviction gap shows up as this request's MTPOT.
        assert!(out.report.outcomes[1].mtpot > out.report.outcomes[0].mtpot);
    }

    #[test]
    fn oracle_never_evicts() {
        let workload = gen_uniform_workload(&WorkloadConfig {
            count: 150,
            input_range: (2, 50),
            output_range: (1, 60),
            max_new_tokens: 64,
            seed: 11,
            arrival: ArrivalModel::ClosedLoop { clients: 1 },
        })
        .unwrap();
        let out = run(&workload, &SchedulerPolicy::Oracle, &base_cfg(300)).unwrap();
        assert_eq!(out.report.total_evictions, 0);
        assert_eq!(out.report.truncated, 0);
        assert!(out.report.max_future_required_pct <= 1.0);
    }

    #[test]
    fn conservative_without_overcommit_never_evicts() {
        let workload = gen_uniform_workload(&WorkloadConfig {
            count: 150,
            input_range: (2, 50),
            output_range: (1, 60),
            max_new_tokens: 64,
            seed: 12,
            arrival: ArrivalModel::ClosedLoop { clients: 1 },
        })
        .unwrap();
        let out = run(
            &workload,
            &SchedulerPolicy::Conservative {
                overcommit_ratio: 1.0,
            },
            &base_cfg(300),
        )
        .unwrap();
        assert_eq!(out.report.total_evictions, 0);
    }

    #[test]
    fn unschedulable_request_is_dropped_not_wedged() {
        // Request 1's worst case (10 + 50) can never fit a conservative
        // budget of 40; it must be dropped and the rest must complete.
        let workload = vec![spec(0, 4, 2, 8), spec(1, 10, 20, 50), spec(2, 4, 2, 8)];
        let out = run(
            &workload,
            &SchedulerPolicy::Conservative {
                overcommit_ratio: 1.0,
            },
            &base_cfg(40),
        )
        .unwrap();
        assert_eq!(out.report.unschedulable, 1);
        assert_eq!(out.report.outcomes.len(), 3);
        assert_eq!(out.report.outcomes[1].tokens, 0);
        assert!(!out.report.outcomes[1].sla_met);
        assert_eq!(out.report.outcomes[0].tokens, 2);
        assert_eq!(out.report.outcomes[2].tokens, 2);
    }

    #[test]
    fn capacity_validation_runs_before_simulation() {
        let workload = vec![spec(0, 100, 5, 10)];
        let err = run(&workload, &SchedulerPolicy::Oracle, &base_cfg(50)).unwrap_err();
        assert!(matches!(err, EngineError::CapacityTooSmall { .. }));
    }

    #[test]
    fn invariant_checker_rejects_double_free() {
        // Fault injection: a pool that lost a request's tokens twice has
        // used < sum of residents.
        let view = EngineStateView {
            pool_used: 4,
            capacity: 100,
            batch_residents: &[6, 5],
            window_entries: &[8, 8],
            expected_window: &[8, 8],
        };
        assert!(step_invariant_check(&view).is_err());
        let ok = EngineStateView {
            pool_used: 11,
            capacity: 100,
            batch_residents: &[6, 5],
            window_entries: &[8, 8],
            expected_window: &[8, 8],
        };
        assert!(step_invariant_check(&ok).is_ok());
    }

    #[test]
    fn invariant_checker_rejects_wrong_window() {
        let view = EngineStateView {
            pool_used: 0,
            capacity: 10,
            batch_residents: &[],
            window_entries: &[8, 3],
            expected_window: &[8, 4],
        };
        assert!(step_invariant_check(&view).is_err());
    }

    #[test]
    fn eviction_frees_victim_tokens_from_pool() {
        // Targeted eviction scenario: after the evict event the victim's
        // tokens are gone from the pool snapshot recorded on the event.
        let workload = vec![spec(0, 6, 7, 9), spec(1, 6, 7, 9)];
        let mut cfg = base_cfg(21);
        cfg.clients = ClientModel::ClosedLoop { clients: 2 };
        let out = run(
            &workload,
            &SchedulerPolicy::Aggressive { watermark: 0.95 },
            &cfg,
        )
        .unwrap();
        let evict = out
            .log
            .events
            .iter()
            .find(|e| e.kind == EventKind::Evict)
            .expect("one eviction");
        // Both requests held 10 tokens each when the eviction fired.
        assert_eq!(evict.resident_tokens, 10);
    }

    #[test]
    fn jsonl_round_trip() {
        let workload = vec![spec(0, 4, 3, 10)];
        let out = run(
            &workload,
            &SchedulerPolicy::Aggressive { watermark: 1.0 },
            &base_cfg(100),
        )
        .unwrap();
        let text = out.log.to_jsonl();
        let parsed = EventLog::from_jsonl(&text).unwrap();
        assert_eq!(parsed, out.log);
    }

    #[test]
    fn empty_workload_is_an_error() {
        assert!(matches!(
            run(&[], &SchedulerPolicy::Oracle, &base_cfg(100)),
            Err(EngineError::EmptyWorkload)
        ));
    }
}
