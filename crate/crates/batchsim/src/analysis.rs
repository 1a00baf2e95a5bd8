//! Output-length distribution similarity across request windows.
//!
//! Validates the predictor's core assumption: consecutive windows of a
//! request stream have similar output-length distributions. The stream is
//! partitioned into non-overlapping windows, each window becomes a length
//! histogram, and windows are compared by cosine similarity.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("need at least {needed} lengths for 2 windows of {window}, got {got}")]
    TooFewLengths {
        needed: usize,
        window: usize,
        got: usize,
    },
    #[error("window size must be positive")]
    ZeroWindow,
    #[error("bin width must be positive")]
    ZeroBinWidth,
    #[error("similarity matrix must be at least 2x2")]
    MatrixTooSmall,
}

/// Histogram of output lengths with token-exact or binned counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LengthHistogram {
    /// Count per bin; bin `i` covers lengths `[min + i*bin_width, min + (i+1)*bin_width)`.
    pub counts: Vec<u64>,
    pub min: u32,
    pub bin_width: u32,
}

impl LengthHistogram {
    /// Histogram over `lengths` with the given support so histograms from
    /// different windows share bins.
    pub fn over_support(lengths: &[u32], min: u32, max: u32, bin_width: u32) -> Self {
        let bins = ((max - min) / bin_width + 1) as usize;
        let mut counts = vec![0u64; bins];
        for &l in lengths {
            let idx = ((l - min) / bin_width) as usize;
            counts[idx] += 1;
        }
        Self {
            counts,
            min,
            bin_width,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Cosine similarity of two count vectors; 0 when either is empty.
pub fn cosine_similarity(a: &[u64], b: &[u64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Pairwise cosine similarity of consecutive non-overlapping windows of the
/// stream, with token-exact bins.
///
/// The trailing remainder (fewer than `window` lengths) is dropped. Diagonal
/// entries are exactly 1.
pub fn window_similarity_matrix(
    output_lengths: &[u32],
    window: usize,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    window_similarity_matrix_binned(output_lengths, window, 1)
}

/// [`window_similarity_matrix`] with a configurable bin width for large or
/// very wide-support traces.
pub fn window_similarity_matrix_binned(
    output_lengths: &[u32],
    window: usize,
    bin_width: u32,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    if window == 0 {
        return Err(AnalysisError::ZeroWindow);
    }
    if bin_width == 0 {
        return Err(AnalysisError::ZeroBinWidth);
    }
    let num_windows = output_lengths.len() / window;
    if num_windows < 2 {
        return Err(AnalysisError::TooFewLengths {
            needed: 2 * window,
            window,
            got: output_lengths.len(),
        });
    }
    let used = &output_lengths[..num_windows * window];
    let min = used.iter().copied().min().expect("non-empty");
    let max = used.iter().copied().max().expect("non-empty");
    let histograms: Vec<LengthHistogram> = (0..num_windows)
        .map(|i| {
            LengthHistogram::over_support(&used[i * window..(i + 1) * window], min, max, bin_width)
        })
        .collect();

    let mut matrix = vec![vec![1.0; num_windows]; num_windows];
    for (i, hist_i) in histograms.iter().enumerate() {
        for (j, hist_j) in histograms.iter().enumerate().skip(i + 1) {
            let sim = cosine_similarity(&hist_i.counts, &hist_j.counts);
            matrix[i][j] = sim;
            matrix[j][i] = sim;
        }
    }
    Ok(matrix)
}

/// Summary of a similarity matrix: mean of the first off-diagonal (adjacent
/// windows) and mean of all off-diagonal entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdjacencySummary {
    pub mean_adjacent: f64,
    pub mean_global: f64,
}

pub fn adjacency_summary(matrix: &[Vec<f64>]) -> Result<AdjacencySummary, AnalysisError> {
    let n = matrix.len();
    if n < 2 || matrix.iter().any(|row| row.len() != n) {
        return Err(AnalysisError::MatrixTooSmall);
    }
    let mean_adjacent = (0..n - 1).map(|i| matrix[i][i + 1]).sum::<f64>() / (n - 1) as f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, row) in matrix.iter().enumerate() {
        for (j, &value) in row.iter().enumerate() {
            if i != j {
                sum += value;
                count += 1;
            }
        }
    }
    Ok(AdjacencySummary {
        mean_adjacent,
        mean_global: sum / count as f64,
    })
}

/// Row-major CSV of the matrix with stable float formatting.
pub fn matrix_to_csv(matrix: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// JSON summary object written next to the matrix CSV.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityReport {
    pub window: usize,
    pub num_windows: usize,
    pub mean_adjacent: f64,
    pub mean_global: f64,
}
