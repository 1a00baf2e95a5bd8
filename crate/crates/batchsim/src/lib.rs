//! batchsim — a deterministic discrete-event simulator of continuous-batching
//! LLM serving.
//!
//! The simulator models a token-granular KV-cache pool, a FIFO request queue,
//! and an iteration-level batching loop, and compares admission schedulers
//! under SLA constraints:
//!
//! * **past-future** — predicts request output lengths from the distribution
//!   of recently finished requests and admits while the batch's estimated
//!   peak future memory fits.
//! * **aggressive** — admits on current consumption up to a watermark.
//! * **conservative** — budgets every request at input + max_new_tokens,
//!   optionally against an overcommitted capacity.
//! * **oracle** — the theoretical optimum given true output lengths.
//!
//! Workloads are generated from uniform length distributions or loaded from
//! CSV traces; runs produce a JSON-lines event log and a metrics report
//! (goodput under SLA, decoding steps, memory utilization, eviction ratio).

pub mod analysis;
pub mod engine;
pub mod memory;
pub mod metrics;
pub mod predictor;
pub mod sched;
pub mod workload;

pub use engine::{
    run, ClientModel, CostModel, EngineError, Event, EventKind, EventLog, SimConfig, SimOutput,
};
pub use memory::{
    brute_force_peak, current_consumed, future_required_memory, BatchSnapshot, KVPool,
    SnapshotEntry,
};
pub use metrics::{MetricsReport, RequestOutcome, SlaThresholds};
pub use predictor::{Aggregation, LengthPredictor, PredictionConfig};
pub use sched::SchedulerPolicy;
pub use workload::{
    concat_workloads, gen_uniform_workload, load_trace, ArrivalModel, RequestSpec, TraceColumns,
    WorkloadConfig,
};
