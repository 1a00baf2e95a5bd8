//! Admission policies behind a single interface.
//!
//! All four schedulers walk the FIFO queue head-first and stop at the first
//! request they cannot admit; the admitted set is therefore always a queue
//! prefix. They differ only in how they budget memory:
//!
//! * `PastFuture` samples predicted output lengths from the historical
//!   window, estimates the batch's peak future memory, and admits while the
//!   peak stays under `(1 - reserved_ratio) * capacity`.
//! * `Aggressive` looks at currently consumed tokens only and admits up to a
//!   watermark fraction of capacity.
//! * `Conservative` budgets every request at its worst case
//!   `input_len + max_new_tokens`, optionally against an overcommitted
//!   capacity.
//! * `Oracle` runs the same peak estimate as `PastFuture` with the true
//!   output lengths and no reserve; it never causes an eviction.

use crate::memory::{future_required_memory, BatchSnapshot, KVPool, MemoryError, SnapshotEntry};
use crate::predictor::{LengthPredictor, PredictionConfig, PredictorError};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("invalid scheduler parameter: {0}")]
    InvalidParameter(String),
    #[error("eviction requested with zero deficit")]
    ZeroDeficit,
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// Admission policy selection plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SchedulerPolicy {
    PastFuture {
        /// Fraction of capacity withheld to absorb prediction error.
        reserved_ratio: f64,
        prediction: PredictionConfig,
    },
    Aggressive {
        /// Fraction of capacity up to which current consumption may grow.
        watermark: f64,
    },
    Conservative {
        /// Multiplier on capacity for the worst-case budget; 1.0 means no
        /// overcommit.
        overcommit_ratio: f64,
    },
    Oracle,
}

impl SchedulerPolicy {
    pub fn past_future(reserved_ratio: f64) -> Self {
        Self::PastFuture {
            reserved_ratio,
            prediction: PredictionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        match *self {
            Self::PastFuture {
                reserved_ratio,
                prediction,
            } => {
                if !(0.0..1.0).contains(&reserved_ratio) {
                    return Err(SchedError::InvalidParameter(format!(
                        "reserved_ratio must be in [0, 1), got {reserved_ratio}"
                    )));
                }
                if prediction.window_size == 0 {
                    return Err(SchedError::InvalidParameter(
                        "window_size must be positive".into(),
                    ));
                }
                Ok(())
            }
            Self::Aggressive { watermark } => {
                if !watermark.is_finite() || watermark <= 0.0 || watermark > 1.0 {
                    return Err(SchedError::InvalidParameter(format!(
                        "watermark must be in (0, 1], got {watermark}"
                    )));
                }
                Ok(())
            }
            Self::Conservative { overcommit_ratio } => {
                if !overcommit_ratio.is_finite() || overcommit_ratio < 1.0 {
                    return Err(SchedError::InvalidParameter(format!(
                        "overcommit_ratio must be >= 1, got {overcommit_ratio}"
                    )));
                }
                Ok(())
            }
            Self::Oracle => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PastFuture { .. } => "past-future",
            Self::Aggressive { .. } => "aggressive",
            Self::Conservative { .. } => "conservative",
            Self::Oracle => "oracle",
        }
    }

    /// Compact parameter string for report rows, e.g. `reserved=0.05`.
    pub fn param_string(&self) -> String {
        match self {
            Self::PastFuture { reserved_ratio, .. } => format!("reserved={reserved_ratio}"),
            Self::Aggressive { watermark } => format!("watermark={watermark}"),
            Self::Conservative { overcommit_ratio } => format!("overcommit={overcommit_ratio}"),
            Self::Oracle => String::new(),
        }
    }
}

/// Scheduler-facing view of one request, queued or running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReqView {
    pub input_len: u32,
    /// Tokens generated so far; nonzero for evicted requests awaiting
    /// re-admission.
    pub generated: u32,
    pub max_new_tokens: u32,
    /// Ground truth, consulted by the oracle only.
    pub true_output_len: u32,
}

impl ReqView {
    fn resident(&self) -> u64 {
        u64::from(self.input_len) + u64::from(self.generated)
    }

    fn worst_case(&self) -> u64 {
        u64::from(self.input_len) + u64::from(self.max_new_tokens)
    }
}

/// Tentative-snapshot entry for a queue candidate.
///
/// A fresh candidate is modeled at its post-prefill footprint (its first
/// token exists the moment it joins the batch), so the estimated peak tracks
/// the decode trajectory exactly. An evicted candidate resumes at its
/// preserved length. For a lone fresh candidate this reduces to the familiar
/// `input_len + predicted_total`.
fn candidate_entry(cand: &ReqView, pred: u32) -> SnapshotEntry {
    let generated = cand.generated.max(1);
    SnapshotEntry::new(cand.input_len, generated, pred.max(generated))
}

/// Outcome of one admission pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissionDecision {
    /// Predicted total output length for each admitted request; the admitted
    /// set is the queue prefix of this length.
    pub admitted_predictions: Vec<u32>,
    /// Refreshed predictions for the running batch, in batch order. Present
    /// for the policies that estimate future memory (PastFuture, Oracle).
    pub running_predictions: Option<Vec<u32>>,
}

impl AdmissionDecision {
    pub fn admitted_count(&self) -> usize {
        self.admitted_predictions.len()
    }
}

/// Dispatch an admission pass for `policy`.
pub fn admit(
    policy: &SchedulerPolicy,
    queue: &[ReqView],
    running: &[ReqView],
    pool: &KVPool,
    predictor: &LengthPredictor,
    rng: &mut impl Rng,
) -> Result<AdmissionDecision, SchedError> {
    match policy {
        SchedulerPolicy::PastFuture {
            reserved_ratio,
            prediction,
        } => admit_past_future(
            queue,
            running,
            pool,
            predictor,
            *reserved_ratio,
            prediction,
            rng,
        ),
        SchedulerPolicy::Aggressive { watermark } => {
            Ok(admit_aggressive(queue, running, pool, *watermark))
        }
        SchedulerPolicy::Conservative { overcommit_ratio } => {
            Ok(admit_conservative(queue, running, pool, *overcommit_ratio))
        }
        SchedulerPolicy::Oracle => admit_oracle(queue, running, pool),
    }
}

/// Admission by sampled future peak memory: refresh running predictions,
/// then admit queue-head requests while the estimated peak of the tentative
/// batch stays within `(1 - reserved_ratio) * capacity`.
pub fn admit_past_future(
    queue: &[ReqView],
    running: &[ReqView],
    pool: &KVPool,
    predictor: &LengthPredictor,
    reserved_ratio: f64,
    prediction: &PredictionConfig,
    rng: &mut impl Rng,
) -> Result<AdmissionDecision, SchedError> {
    let reps = prediction.repetitions(running.len());
    let running_preds: Vec<u32> = running
        .iter()
        .map(|r| {
            predictor.predict_one(
                rng,
                r.generated,
                r.max_new_tokens,
                true,
                reps,
                prediction.aggregation,
            )
        })
        .collect::<Result<_, _>>()?;

    let mut tentative: BatchSnapshot = running
        .iter()
        .zip(&running_preds)
        .map(|(r, &pred)| SnapshotEntry::new(r.input_len, r.generated, pred))
        .collect();

    let threshold = (1.0 - reserved_ratio) * pool.capacity() as f64;
    let mut admitted = Vec::new();
    for cand in queue {
        let pred = predictor.predict_one(
            rng,
            cand.generated,
            cand.max_new_tokens,
            false,
            reps,
            prediction.aggregation,
        )?;
        tentative.push(candidate_entry(cand, pred));
        let m_star = future_required_memory(&tentative)?;
        if m_star as f64 <= threshold {
            admitted.push(pred);
        } else {
            tentative.pop();
            break;
        }
    }
    Ok(AdmissionDecision {
        admitted_predictions: admitted,
        running_predictions: Some(running_preds),
    })
}

/// Admission by current consumption only, up to `watermark * capacity`.
/// Output-length estimates are ignored entirely.
pub fn admit_aggressive(
    queue: &[ReqView],
    running: &[ReqView],
    pool: &KVPool,
    watermark: f64,
) -> AdmissionDecision {
    let budget = watermark * pool.capacity() as f64;
    let mut committed: u64 = running.iter().map(ReqView::resident).sum();
    let mut admitted = Vec::new();
    for cand in queue {
        if (committed + cand.resident()) as f64 <= budget {
            committed += cand.resident();
            admitted.push(cand.max_new_tokens.max(cand.generated));
        } else {
            break;
        }
    }
    AdmissionDecision {
        admitted_predictions: admitted,
        running_predictions: None,
    }
}

/// Admission by worst-case budget: every request is charged
/// `input_len + max_new_tokens` against `overcommit_ratio * capacity`.
pub fn admit_conservative(
    queue: &[ReqView],
    running: &[ReqView],
    pool: &KVPool,
    overcommit_ratio: f64,
) -> AdmissionDecision {
    let budget = overcommit_ratio * pool.capacity() as f64;
    let mut committed: u64 = running.iter().map(ReqView::worst_case).sum();
    let mut admitted = Vec::new();
    for cand in queue {
        if (committed + cand.worst_case()) as f64 <= budget {
            committed += cand.worst_case();
            admitted.push(cand.max_new_tokens.max(cand.generated));
        } else {
            break;
        }
    }
    AdmissionDecision {
        admitted_predictions: admitted,
        running_predictions: None,
    }
}

/// The theoretical optimum: Past-Future admission with zero reserve and the
/// true output length standing in for every prediction.
pub fn admit_oracle(
    queue: &[ReqView],
    running: &[ReqView],
    pool: &KVPool,
) -> Result<AdmissionDecision, SchedError> {
    let true_pred = |r: &ReqView| r.true_output_len.max(r.generated);
    let running_preds: Vec<u32> = running.iter().map(true_pred).collect();
    let mut tentative: BatchSnapshot = running
        .iter()
        .zip(&running_preds)
        .map(|(r, &pred)| SnapshotEntry::new(r.input_len, r.generated, pred))
        .collect();

    let capacity = pool.capacity();
    let mut admitted = Vec::new();
    for cand in queue {
        let pred = true_pred(cand);
        tentative.push(candidate_entry(cand, pred));
        if future_required_memory(&tentative)? <= capacity {
            admitted.push(pred);
        } else {
            tentative.pop();
            break;
        }
    }
    Ok(AdmissionDecision {
        admitted_predictions: admitted,
        running_predictions: Some(running_preds),
    })
}

/// Pick eviction victims, most recently admitted first, until their freed
/// tokens cover `deficit`. The oldest request is never evicted when it is the
/// only one left, so the batch always keeps making progress.
///
/// `footprints` lists resident token counts in admission order (oldest
/// first); the returned indices are in eviction order.
pub fn select_eviction_victims(footprints: &[u64], deficit: u64) -> Result<Vec<usize>, SchedError> {
    if deficit == 0 {
        return Err(SchedError::ZeroDeficit);
    }
    let mut victims = Vec::new();
    let mut freed = 0u64;
    for idx in (1..footprints.len()).rev() {
        if freed >= deficit {
            break;
        }
        victims.push(idx);
        freed += footprints[idx];
    }
    Ok(victims)
}

/// Whether `req` could ever be admitted into an otherwise idle system under
/// `policy`, assuming the predictor's window no longer changes. Used to
/// detect permanently unschedulable requests instead of spinning forever.
pub fn admissible_alone(
    policy: &SchedulerPolicy,
    req: &ReqView,
    capacity: u64,
    predictor: &LengthPredictor,
) -> bool {
    match *policy {
        SchedulerPolicy::PastFuture { reserved_ratio, .. } => {
            let pred_min = predictor
                .window()
                .counts()
                .keys()
                .next()
                .copied()
                .unwrap_or(req.max_new_tokens)
                .clamp(req.generated + 1, req.max_new_tokens.max(req.generated + 1));
            let solo_peak = u64::from(req.input_len) + u64::from(pred_min);
            solo_peak as f64 <= (1.0 - reserved_ratio) * capacity as f64
        }
        SchedulerPolicy::Aggressive { watermark } => {
            req.resident() as f64 <= watermark * capacity as f64
        }
        SchedulerPolicy::Conservative { overcommit_ratio } => {
            req.worst_case() as f64 <= overcommit_ratio * capacity as f64
        }
        SchedulerPolicy::Oracle => {
            u64::from(req.input_len) + u64::from(req.true_output_len.max(req.generated)) <= capacity
        }
    }
}
