//! Token-denominated KV-cache accounting and the future-required-memory
//! estimator.
//!
//! Memory is counted in tokens: one resident token equals one KV-cache slot.
//! The estimator answers "what is the peak number of resident tokens this
//! batch will reach before every request in it finishes", assuming each
//! request finishes exactly at its predicted total and frees its slots at
//! that moment.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("snapshot entry {index}: predicted_total {predicted} < generated {generated}")]
    PredictionBehindGeneration {
        index: usize,
        predicted: u32,
        generated: u32,
    },
    #[error("pool overflow: used {used} + {delta} exceeds capacity {capacity}")]
    PoolOverflow {
        used: u64,
        delta: u64,
        capacity: u64,
    },
    #[error("pool underflow: freeing {delta} with only {used} used")]
    PoolUnderflow { used: u64, delta: u64 },
}

/// Per-request view the estimator works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SnapshotEntry {
    /// Prompt length in tokens.
    pub input_len: u32,
    /// Tokens generated so far.
    pub generated: u32,
    /// Predicted total output length (scheduler-assigned).
    pub predicted_total: u32,
}

impl SnapshotEntry {
    pub fn new(input_len: u32, generated: u32, predicted_total: u32) -> Self {
        Self {
            input_len,
            generated,
            predicted_total,
        }
    }

    /// Tokens currently held: prompt plus generated output.
    pub fn resident(&self) -> u64 {
        u64::from(self.input_len) + u64::from(self.generated)
    }

    /// Predicted tokens still to generate.
    pub fn remaining(&self) -> u64 {
        u64::from(self.predicted_total.saturating_sub(self.generated))
    }
}

/// The running batch as the estimator sees it: one entry per request.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchSnapshot {
    entries: Vec<SnapshotEntry>,
}

impl BatchSnapshot {
    pub fn new(entries: Vec<SnapshotEntry>) -> Self {
        Self { entries }
    }

    pub fn push(&mut self, entry: SnapshotEntry) {
        self.entries.push(entry);
    }

    pub fn pop(&mut self) -> Option<SnapshotEntry> {
        self.entries.pop()
    }

    pub fn entries(&self) -> &[SnapshotEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    fn validate(&self) -> Result<(), MemoryError> {
        for (index, e) in self.entries.iter().enumerate() {
            if e.predicted_total < e.generated {
                return Err(MemoryError::PredictionBehindGeneration {
                    index,
                    predicted: e.predicted_total,
                    generated: e.generated,
                });
            }
        }
        Ok(())
    }
}

impl FromIterator<SnapshotEntry> for BatchSnapshot {
    fn from_iter<T: IntoIterator<Item = SnapshotEntry>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Tokens currently resident for the whole batch.
pub fn current_consumed(snapshot: &BatchSnapshot) -> u64 {
    snapshot.entries.iter().map(SnapshotEntry::resident).sum()
}

/// Peak future memory demand of the batch, in tokens.
///
/// Entries are sorted by remaining generation length descending; the memory
/// occupancy at the moment entry `i` finishes (with entries `1..i` still
/// resident and grown by `remaining(i)` tokens each) is
///
/// ```text
/// M_i = sum_{j<=i} (input_len_j + generated_j) + remaining_i * i
/// ```
///
/// and the answer is `max_i M_i`. A request that finishes frees its tokens
/// only after the step that completes it, so the finishing request's tokens
/// are counted at its own peak.
pub fn future_required_memory(snapshot: &BatchSnapshot) -> Result<u64, MemoryError> {
    snapshot.validate()?;
    let mut sorted: Vec<&SnapshotEntry> = snapshot.entries.iter().collect();
    sorted.sort_by_key(|e| std::cmp::Reverse(e.remaining()));
    let mut resident_prefix = 0u64;
    let mut peak = 0u64;
    for (i, entry) in sorted.iter().enumerate() {
        resident_prefix += entry.resident();
        let candidate = resident_prefix + entry.remaining() * (i as u64 + 1);
        peak = peak.max(candidate);
    }
    Ok(peak)
}

/// Step-by-step simulation of the batch decoding to completion; the
/// independent oracle for [`future_required_memory`].
///
/// Every unfinished entry gains one token per step and leaves exactly when
/// its generated count reaches its predicted total. The peak is measured
/// after growth and before finished entries are removed at that step; the
/// initial state is measured too, so entries that are already finished at
/// snapshot time hold their memory for exactly one observation.
pub fn brute_force_peak(snapshot: &BatchSnapshot) -> u64 {
    let mut live: Vec<SnapshotEntry> = snapshot.entries.clone();
    let mut peak: u64 = live.iter().map(SnapshotEntry::resident).sum();
    loop {
        live.retain(|e| e.generated < e.predicted_total);
        if live.is_empty() {
            return peak;
        }
        for e in live.iter_mut() {
            e.generated += 1;
        }
        let total: u64 = live.iter().map(SnapshotEntry::resident).sum();
        peak = peak.max(total);
    }
}

/// The KV-cache slot pool. Owned and mutated by the engine only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KVPool {
    capacity: u64,
    used: u64,
}

impl KVPool {
    pub fn new(capacity: u64) -> Self {
        Self { capacity, used: 0 }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used
    }

    pub fn allocate(&mut self, tokens: u64) -> Result<(), MemoryError> {
        if self.used + tokens > self.capacity {
            return Err(MemoryError::PoolOverflow {
                used: self.used,
                delta: tokens,
                capacity: self.capacity,
            });
        }
        self.used += tokens;
        Ok(())
    }

    pub fn release(&mut self, tokens: u64) -> Result<(), MemoryError> {
        if tokens > self.used {
            return Err(MemoryError::PoolUnderflow {
                used: self.used,
                delta: tokens,
            });
        }
        self.used -= tokens;
        Ok(())
    }
}
