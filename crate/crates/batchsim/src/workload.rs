//! Synthetic workload generation and CSV trace ingestion.
//!
//! A workload is an ordered list of [`RequestSpec`]s. Specs can be generated
//! from uniform length distributions with a seeded RNG, loaded from a CSV
//! trace (BurstGPT-style column layouts are supported via configurable column
//! names), or concatenated from parts to build streams whose output-length
//! distribution shifts over time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// One request in a workload.
///
/// `true_output_len` is ground truth: the number of tokens the request will
/// actually generate. Schedulers never see it (the oracle excepted), the
/// engine uses it to decide when a request finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: u64,
    /// Arrival offset in seconds. Only meaningful for open-loop replay;
    /// closed-loop workloads leave it at 0 and the engine schedules arrivals.
    pub arrival_time: f64,
    pub input_len: u32,
    pub true_output_len: u32,
    pub max_new_tokens: u32,
}

impl RequestSpec {
    /// Check the per-request invariants.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.input_len < 1 {
            return Err(WorkloadError::InvalidSpec {
                id: self.id,
                reason: "input_len must be >= 1".into(),
            });
        }
        if self.true_output_len < 1 || self.true_output_len > self.max_new_tokens {
            return Err(WorkloadError::InvalidSpec {
                id: self.id,
                reason: format!(
                    "true_output_len {} outside [1, max_new_tokens={}]",
                    self.true_output_len, self.max_new_tokens
                ),
            });
        }
        Ok(())
    }
}

/// How request arrival times are assigned at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ArrivalModel {
    /// Arrival times stay 0; the engine issues requests from a pool of
    /// clients, each sending its next request when the previous one finishes.
    ClosedLoop { clients: usize },
    /// Poisson arrivals at `rate` requests/second starting at 0.
    OpenLoop { rate: f64 },
}

/// Parameters for [`gen_uniform_workload`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub count: usize,
    /// Inclusive token range for input lengths.
    pub input_range: (u32, u32),
    /// Inclusive token range for true output lengths.
    pub output_range: (u32, u32),
    pub max_new_tokens: u32,
    pub seed: u64,
    pub arrival: ArrivalModel,
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let check = |name: &str, (lo, hi): (u32, u32)| {
            if lo < 1 || lo > hi {
                Err(WorkloadError::InvalidRange {
                    name: name.into(),
                    lo,
                    hi,
                })
            } else {
                Ok(())
            }
        };
        check("input_range", self.input_range)?;
        check("output_range", self.output_range)?;
        if self.output_range.1 > self.max_new_tokens {
            return Err(WorkloadError::OutputExceedsCap {
                output_max: self.output_range.1,
                max_new_tokens: self.max_new_tokens,
            });
        }
        if let ArrivalModel::OpenLoop { rate } = self.arrival {
            if !rate.is_finite() || rate <= 0.0 {
                return Err(WorkloadError::InvalidRate { rate });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid {name}: [{lo}, {hi}] (min must be >= 1 and <= max)")]
    InvalidRange { name: String, lo: u32, hi: u32 },
    #[error("output_range max {output_max} exceeds max_new_tokens {max_new_tokens}")]
    OutputExceedsCap {
        output_max: u32,
        max_new_tokens: u32,
    },
    #[error("open-loop rate must be positive, got {rate}")]
    InvalidRate { rate: f64 },
    #[error("request {id} violates invariants: {reason}")]
    InvalidSpec { id: u64, reason: String },
    #[error("trace column {0:?} not found in header")]
    MissingColumn(String),
    #[error("failed to read trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse trace: {0}")]
    Csv(#[from] csv::Error),
}

/// Generate `cfg.count` requests with input and output lengths drawn
/// uniformly (inclusive) from the configured ranges.
///
/// Identical configs (including seed) produce identical workloads.
pub fn gen_uniform_workload(cfg: &WorkloadConfig) -> Result<Vec<RequestSpec>, WorkloadError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut specs = Vec::with_capacity(cfg.count);
    let mut clock = 0.0f64;
    // The Exp sampler is constructed even for closed-loop configs so the
    // per-request draw order stays (input, output, gap).
    let gap = match cfg.arrival {
        ArrivalModel::OpenLoop { rate } => Some(Exp::new(rate).expect("validated rate")),
        ArrivalModel::ClosedLoop { .. } => None,
    };
    for id in 0..cfg.count as u64 {
        let input_len = rng.gen_range(cfg.input_range.0..=cfg.input_range.1);
        let true_output_len = rng.gen_range(cfg.output_range.0..=cfg.output_range.1);
        let arrival_time = match gap {
            Some(exp) => {
                clock += exp.sample(&mut rng);
                clock
            }
            None => 0.0,
        };
        specs.push(RequestSpec {
            id,
            arrival_time,
            input_len,
            true_output_len,
            max_new_tokens: cfg.max_new_tokens,
        });
    }
    Ok(specs)
}

/// Column names mapping a CSV trace onto request fields.
#[derive(Debug, Clone)]
pub struct TraceColumns {
    pub input_tokens: String,
    pub output_tokens: String,
    /// Optional arrival timestamp column (seconds). When absent, arrival
    /// times are left at 0 for closed-loop use.
    pub timestamp: Option<String>,
}

impl Default for TraceColumns {
    fn default() -> Self {
        Self {
            input_tokens: "input_tokens".into(),
            output_tokens: "output_tokens".into(),
            timestamp: None,
        }
    }
}

/// Row-level accounting from a trace load.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadSummary {
    pub loaded: usize,
    /// Rows dropped because input or output tokens were zero.
    pub skipped_zero: usize,
    /// Rows dropped because a mapped field failed to parse.
    pub skipped_unparsable: usize,
    /// Rows whose output length was clamped down to the max_new_tokens cap.
    pub clamped_to_cap: usize,
}

/// Load a workload from a CSV trace with a header row.
///
/// Malformed rows are skipped and counted in the [`LoadSummary`] rather than
/// failing the load; a missing mapped column is a configuration error.
/// `max_new_tokens` is applied as a global cap to every loaded request.
pub fn load_trace(
    path: &Path,
    columns: &TraceColumns,
    max_new_tokens: u32,
) -> Result<(Vec<RequestSpec>, LoadSummary), WorkloadError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| WorkloadError::MissingColumn(name.to_string()))
    };
    let input_idx = find(&columns.input_tokens)?;
    let output_idx = find(&columns.output_tokens)?;
    let ts_idx = match &columns.timestamp {
        Some(name) => Some(find(name)?),
        None => None,
    };

    let mut specs = Vec::new();
    let mut summary = LoadSummary::default();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                summary.skipped_unparsable += 1;
                continue;
            }
        };
        let parse_u64 = |idx: usize| record.get(idx).and_then(|f| f.trim().parse::<u64>().ok());
        let (input, output) = match (parse_u64(input_idx), parse_u64(output_idx)) {
            (Some(i), Some(o)) => (i, o),
            _ => {
                summary.skipped_unparsable += 1;
                continue;
            }
        };
        if input == 0 || output == 0 {
            summary.skipped_zero += 1;
            continue;
        }
        let arrival_time = match ts_idx {
            Some(idx) => match record.get(idx).and_then(|f| f.trim().parse::<f64>().ok()) {
                Some(t) if t >= 0.0 => t,
                _ => {
                    summary.skipped_unparsable += 1;
                    continue;
                }
            },
            None => 0.0,
        };
        let mut true_output_len = output.min(u64::from(u32::MAX)) as u32;
        true_output_len = true_output_len.max(1);
        if true_output_len > max_new_tokens {
            true_output_len = max_new_tokens;
            summary.clamped_to_cap += 1;
        }
        specs.push(RequestSpec {
            id: specs.len() as u64,
            arrival_time,
            input_len: input.min(u64::from(u32::MAX)) as u32,
            true_output_len,
            max_new_tokens,
        });
        summary.loaded += 1;
    }
    Ok((specs, summary))
}

/// Concatenate workload parts into one stream.
///
/// Ids are reassigned densely in order; open-loop arrival times of part `k`
/// are offset by the last arrival time of the preceding parts so the streams
/// play back to back.
pub fn concat_workloads(parts: &[Vec<RequestSpec>]) -> Vec<RequestSpec> {
    let mut out = Vec::with_capacity(parts.iter().map(Vec::len).sum());
    let mut offset = 0.0f64;
    for part in parts {
        let mut last = offset;
        for spec in part {
            let mut s = spec.clone();
            s.id = out.len() as u64;
            s.arrival_time += offset;
            last = s.arrival_time;
            out.push(s);
        }
        offset = last;
    }
    out
}

/// Serialize a workload as a JSON array with stable field names.
pub fn to_json(specs: &[RequestSpec]) -> String {
    serde_json::to_string_pretty(specs).expect("workload serialization cannot fail")
}

/// Parse a workload from the JSON produced by [`to_json`].
pub fn from_json(json: &str) -> Result<Vec<RequestSpec>, serde_json::Error> {
    serde_json::from_str(json)
}
