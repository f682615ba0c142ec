//! How splitting a batch distorts its normalisation statistics.

use alloc::vec::Vec;

use num_traits::{Signed, Zero};

use crate::rational::{self, Rational};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("split {index} is empty")]
    InvalidSplit { index: usize },
    #[error("split sizes sum to {sum} but the batch has {len} elements")]
    SplitMismatch { sum: usize, len: usize },
}

/// Population mean and variance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeanVar {
    pub mean: Rational,
    pub variance: Rational,
}

impl MeanVar {
    pub fn of(xs: &[Rational]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = rational::int(xs.len() as i64);
        let mean = xs.iter().fold(Rational::zero(), |a, x| a + x) / &n;
        let variance = xs.iter().fold(Rational::zero(), |a, x| {
            let d = x - &mean;
            a + &d * &d
        }) / &n;
        Some(MeanVar { mean, variance })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDivergence {
    pub full: MeanVar,
    pub splits: Vec<MeanVar>,
    /// Largest `|split mean - full mean|`.
    pub mean_deviation: Rational,
    /// Largest `|split variance - full variance|`.
    pub variance_deviation: Rational,
    /// The larger of the two deviations.
    pub max_deviation: Rational,
}

/// Compares the statistics of `batch` with those of its contiguous splits.
pub fn batch_stats_divergence(batch: &[Rational], split_sizes: &[usize]) -> Result<BatchDivergence, StatsError> {
    let full = MeanVar::of(batch).ok_or(StatsError::EmptyBatch)?;
    if let Some(index) = split_sizes.iter().position(|&s| s == 0) {
        return Err(StatsError::InvalidSplit { index });
    }
    let sum: usize = split_sizes.iter().sum();
    if sum != batch.len() {
        return Err(StatsError::SplitMismatch { sum, len: batch.len() });
    }
    let mut start = 0;
    let mut splits = Vec::with_capacity(split_sizes.len());
    let mut mean_deviation = Rational::zero();
    let mut variance_deviation = Rational::zero();
    for &size in split_sizes {
        let mv = MeanVar::of(&batch[start..start + size]).expect("non-empty split");
        start += size;
        mean_deviation = rational::max(&mean_deviation, &(&mv.mean - &full.mean).abs());
        variance_deviation = rational::max(&variance_deviation, &(&mv.variance - &full.variance).abs());
        splits.push(mv);
    }
    let max_deviation = rational::max(&mean_deviation, &variance_deviation);
    Ok(BatchDivergence { full, splits, mean_deviation, variance_deviation, max_deviation })
}
