//! Output-length prediction from a sliding window of completed requests.
//!
//! The predictor keeps the last `w` observed output lengths and treats their
//! empirical distribution P(l) = count(l) / w as the length distribution of
//! upcoming requests. Queued requests are predicted by sampling P(l);
//! running requests are re-predicted by sampling the truncated distribution
//! P(l | l > generated), so a prediction always stays ahead of what a request
//! has already produced.

use rand::Rng;
use serde::Serialize;
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PredictorError {
    #[error("output length must be >= 1, got {0}")]
    InvalidLength(u32),
    #[error("cannot sample from an empty history window")]
    EmptyWindow,
}

/// How repeated samples for one request are folded into a single prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Aggregation {
    /// Maximum of the samples. Biases predictions upward, trading memory
    /// headroom for fewer evictions.
    Max,
    /// Rounded mean of the samples.
    Mean,
}

/// Tunables for batch prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictionConfig {
    /// History window size `w`.
    pub window_size: usize,
    /// Numerator of the repetition rule: a scheduling pass over a batch of
    /// size `b` samples each request `max(1, ceil(repetition_constant / b))`
    /// times. Small batches get more repetitions.
    pub repetition_constant: u32,
    pub aggregation: Aggregation,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            window_size: 1000,
            repetition_constant: 64,
            aggregation: Aggregation::Max,
        }
    }
}

impl PredictionConfig {
    /// Repetitions for a scheduling pass over a running batch of `batch_size`.
    pub fn repetitions(&self, batch_size: usize) -> u32 {
        let b = batch_size.max(1) as u32;
        self.repetition_constant.div_ceil(b).max(1)
    }
}

/// Ring buffer of the last `capacity` completed output lengths plus the
/// induced count distribution.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    capacity: usize,
    entries: VecDeque<u32>,
    counts: BTreeMap<u32, u64>,
    /// (length, cumulative count) pairs in ascending length order, rebuilt on
    /// every mutation so sampling is a binary search.
    cumulative: Vec<(u32, u64)>,
    total: u64,
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            counts: BTreeMap::new(),
            cumulative: Vec::new(),
            total: 0,
        }
    }

    /// Window pre-filled with `capacity` copies of `fill`, the service
    /// startup state before any real completion has been observed.
    pub fn prefilled(capacity: usize, fill: u32) -> Self {
        let mut w = Self::new(capacity);
        for _ in 0..capacity {
            w.record(fill).expect("fill value must be >= 1");
        }
        w
    }

    pub fn record(&mut self, len: u32) -> Result<(), PredictorError> {
        if len < 1 {
            return Err(PredictorError::InvalidLength(len));
        }
        if self.entries.len() == self.capacity {
            let old = self.entries.pop_front().expect("capacity > 0");
            let c = self.counts.get_mut(&old).expect("count tracked");
            *c -= 1;
            if *c == 0 {
                self.counts.remove(&old);
            }
            self.total -= 1;
        }
        self.entries.push_back(len);
        *self.counts.entry(len).or_insert(0) += 1;
        self.total += 1;
        self.rebuild_cumulative();
        Ok(())
    }

    fn rebuild_cumulative(&mut self) {
        self.cumulative.clear();
        let mut acc = 0u64;
        for (&len, &count) in &self.counts {
            acc += count;
            self.cumulative.push((len, acc));
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn counts(&self) -> &BTreeMap<u32, u64> {
        &self.counts
    }

    /// Entries in insertion order, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().copied()
    }

    /// P(len) under the current window.
    pub fn probability(&self, len: u32) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(&len).copied().unwrap_or(0) as f64 / self.total as f64
    }

    fn sample_range(&self, rng: &mut impl Rng, base: u64, span: u64) -> u32 {
        debug_assert!(span > 0);
        let target = base + rng.gen_range(0..span);
        let idx = self.cumulative.partition_point(|&(_, cum)| cum <= target);
        self.cumulative[idx].0
    }

    /// Draw one length from P(l).
    pub fn sample(&self, rng: &mut impl Rng) -> Result<u32, PredictorError> {
        if self.total == 0 {
            return Err(PredictorError::EmptyWindow);
        }
        Ok(self.sample_range(rng, 0, self.total))
    }

    /// Draw one length from P(l | l > min), falling back to `fallback` when
    /// no window entry exceeds `min`.
    pub fn sample_greater_than(&self, rng: &mut impl Rng, min: u32, fallback: u32) -> u32 {
        let idx = self.cumulative.partition_point(|&(len, _)| len <= min);
        if idx == self.cumulative.len() {
            return fallback;
        }
        let base = if idx == 0 {
            0
        } else {
            self.cumulative[idx - 1].1
        };
        self.sample_range(rng, base, self.total - base)
    }
}

/// Snapshot of the distribution for export and offline analysis.
#[derive(Debug, Clone, Serialize)]
pub struct DistributionDump {
    pub counts: BTreeMap<u32, u64>,
    pub total: u64,
    pub capacity: usize,
}

/// Predicted total output lengths for one scheduling pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictedLengths {
    /// One prediction per running request, in input order.
    pub running: Vec<u32>,
    /// One prediction per queued candidate, in input order.
    pub queued: Vec<u32>,
}

/// The historical-distribution length predictor.
#[derive(Debug, Clone)]
pub struct LengthPredictor {
    window: HistoryWindow,
}

impl LengthPredictor {
    /// Empty predictor; sampling fails until a completion is recorded.
    pub fn new(window_size: usize) -> Self {
        Self {
            window: HistoryWindow::new(window_size),
        }
    }

    /// Startup state: the window holds `window_size` copies of the preset
    /// maximum output length, replaced organically as completions arrive.
    pub fn with_startup(window_size: usize, max_new_tokens: u32) -> Self {
        Self {
            window: HistoryWindow::prefilled(window_size, max_new_tokens),
        }
    }

    pub fn window(&self) -> &HistoryWindow {
        &self.window
    }

    /// Record the actual output length of a finished request.
    pub fn record_completion(&mut self, len: u32) -> Result<(), PredictorError> {
        self.window.record(len)
    }

    /// Sample a predicted length from P(l).
    pub fn sample_unconditional(&self, rng: &mut impl Rng) -> Result<u32, PredictorError> {
        self.window.sample(rng)
    }

    /// Sample a predicted length from P(l | l > l_min); returns
    /// `max_new_tokens` when the request has outlived all history. The result
    /// is always greater than `l_min` provided `max_new_tokens > l_min`.
    pub fn sample_conditional(&self, rng: &mut impl Rng, l_min: u32, max_new_tokens: u32) -> u32 {
        self.window.sample_greater_than(rng, l_min, max_new_tokens)
    }

    /// Aggregated, clamped prediction for one request.
    ///
    /// `generated` is the tokens the request has produced so far (0 for a
    /// fresh candidate). Samples the truncated distribution for requests with
    /// history behind them and the unconditional one otherwise, repeats
    /// `repetitions` times, aggregates, and clamps into
    /// `[generated + 1, max_new_tokens]`.
    pub fn predict_one(
        &self,
        rng: &mut impl Rng,
        generated: u32,
        max_new_tokens: u32,
        conditional: bool,
        repetitions: u32,
        aggregation: Aggregation,
    ) -> Result<u32, PredictorError> {
        let reps = repetitions.max(1);
        let mut max = 0u32;
        let mut sum = 0u64;
        for _ in 0..reps {
            let s = if conditional {
                self.sample_conditional(rng, generated, max_new_tokens)
            } else {
                self.sample_unconditional(rng)?
            };
            max = max.max(s);
            sum += u64::from(s);
        }
        let agg = match aggregation {
            Aggregation::Max => max,
            Aggregation::Mean => {
                let mean = (sum as f64 / f64::from(reps)).round() as u64;
                mean.min(u64::from(u32::MAX)) as u32
            }
        };
        Ok(agg.clamp(generated + 1, max_new_tokens.max(generated + 1)))
    }

    /// Predict the whole batch for a scheduling pass: conditional resampling
    /// for running requests, unconditional sampling for queued candidates.
    ///
    /// `running` holds (generated, max_new_tokens) pairs; `queued` holds
    /// max_new_tokens per candidate.
    pub fn predict_batch(
        &self,
        rng: &mut impl Rng,
        running: &[(u32, u32)],
        queued: &[u32],
        repetitions: u32,
        aggregation: Aggregation,
    ) -> Result<PredictedLengths, PredictorError> {
        let running_preds = running
            .iter()
            .map(|&(generated, max_new)| {
                self.predict_one(rng, generated, max_new, true, repetitions, aggregation)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let queued_preds = queued
            .iter()
            .map(|&max_new| self.predict_one(rng, 0, max_new, false, repetitions, aggregation))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PredictedLengths {
            running: running_preds,
            queued: queued_preds,
        })
    }

    pub fn dump(&self) -> DistributionDump {
        DistributionDump {
            counts: self.window.counts().clone(),
            total: self.window.len() as u64,
            capacity: self.window.capacity(),
        }
    }
}
