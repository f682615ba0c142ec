//! Reductions whose association order is fixed by an explicit plan.

use alloc::vec::Vec;
use core::ops::Range;

use num_traits::Signed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::format::{add, FloatFormat, FloatValue};
use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("grid split {g} is invalid for {n} elements")]
    InvalidSplit { n: usize, g: usize },
    #[error("chunks do not partition [0, {n})")]
    NotAPartition { n: usize },
    #[error("plan covers {plan} elements but {actual} were supplied")]
    PlanMismatch { plan: usize, actual: usize },
    #[error("input element {index} is not in the reduction format")]
    FormatMismatch { index: usize },
}

/// How chunk partials are folded together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Combine {
    /// Left to right in chunk order.
    #[default]
    Sequential,
    /// Pairwise, level by level; an odd partial is carried up unchanged.
    Tree,
}

/// Partition of `[0, n)` into chunks. Each chunk is summed left to right,
/// then the partials are combined in chunk order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReductionPlan {
    n: usize,
    chunks: Vec<Range<usize>>,
    combine: Combine,
}

impl ReductionPlan {
    /// `g` contiguous chunks; the first `n mod g` have `ceil(n/g)` elements,
    /// the rest `floor(n/g)`.
    pub fn balanced(n: usize, g: usize) -> Result<Self, PlanError> {
        if g == 0 || g > n.max(1) {
            return Err(PlanError::InvalidSplit { n, g });
        }
        let base = n / g;
        let extra = n % g;
        let mut chunks = Vec::with_capacity(g);
        let mut start = 0;
        for i in 0..g {
            let len = base + usize::from(i < extra);
            chunks.push(start..start + len);
            start += len;
        }
        Ok(ReductionPlan { n, chunks, combine: Combine::Sequential })
    }

    /// Arbitrary chunk list, combined in the order given. The chunks must be
    /// non-empty and partition `[0, n)`.
    pub fn from_chunks(n: usize, chunks: Vec<Range<usize>>) -> Result<Self, PlanError> {
        let mut sorted: Vec<_> = chunks.iter().cloned().collect();
        sorted.sort_by_key(|r| r.start);
        let mut next = 0;
        for r in &sorted {
            if r.start != next || r.end <= r.start {
                return Err(PlanError::NotAPartition { n });
            }
            next = r.end;
        }
        if next != n || (n > 0 && chunks.is_empty()) {
            return Err(PlanError::NotAPartition { n });
        }
        Ok(ReductionPlan { n, chunks, combine: Combine::Sequential })
    }

    pub fn with_combine(mut self, combine: Combine) -> Self {
        self.combine = combine;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn grid(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunks(&self) -> &[Range<usize>] {
        &self.chunks
    }

    pub fn combine(&self) -> Combine {
        self.combine
    }
}

fn sum_sequential(mut it: impl Iterator<Item = FloatValue>, format: FloatFormat) -> FloatValue {
    match it.next() {
        None => FloatValue::zero(format),
        Some(first) => it.fold(first, add),
    }
}

/// Sums `values` in `format`, rounding after every addition, in the order
/// the plan prescribes.
pub fn reduce_with_plan(
    values: &[FloatValue],
    format: FloatFormat,
    plan: &ReductionPlan,
) -> Result<FloatValue, PlanError> {
    if values.len() != plan.n {
        return Err(PlanError::PlanMismatch { plan: plan.n, actual: values.len() });
    }
    if let Some(index) = values.iter().position(|v| v.format() != format) {
        return Err(PlanError::FormatMismatch { index });
    }
    let partials: Vec<FloatValue> = plan
        .chunks
        .iter()
        .map(|r| sum_sequential(values[r.clone()].iter().copied(), format))
        .collect();
    Ok(match plan.combine {
        Combine::Sequential => sum_sequential(partials.into_iter(), format),
        Combine::Tree => {
            let mut level = partials;
            while level.len() > 1 {
                level = level
                    .chunks(2)
                    .map(|pair| if pair.len() == 2 { add(pair[0], pair[1]) } else { pair[0] })
                    .collect();
            }
            level.pop().unwrap_or_else(|| FloatValue::zero(format))
        }
    })
}

/// Divergence between two executions of the same reduction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingDelta {
    /// `|a - b|` computed exactly; `None` if either result is not finite and
    /// the two differ.
    pub delta: Option<Rational>,
    pub bit_identical: bool,
    pub left: FloatValue,
    pub right: FloatValue,
}

pub fn coupling_delta(
    values: &[FloatValue],
    format: FloatFormat,
    plan_i: &ReductionPlan,
    plan_j: &ReductionPlan,
) -> Result<CouplingDelta, PlanError> {
    if plan_i.n != plan_j.n {
        return Err(PlanError::PlanMismatch { plan: plan_i.n, actual: plan_j.n });
    }
    let left = reduce_with_plan(values, format, plan_i)?;
    let right = reduce_with_plan(values, format, plan_j)?;
    let bit_identical = left.bits() == right.bits();
    let delta = if bit_identical {
        Some(Rational::default())
    } else {
        match (left.to_rational(), right.to_rational()) {
            (Some(a), Some(b)) => Some((a - b).abs()),
            _ => None,
        }
    };
    Ok(CouplingDelta { delta, bit_identical, left, right })
}

/// `n` values drawn uniformly from `(lo, hi)` in double precision and then
/// rounded into `format`.
pub fn uniform_inputs(format: FloatFormat, n: usize, lo: f64, hi: f64, seed: u64) -> Vec<FloatValue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| FloatValue::from_f64(format, rng.random_range(lo..hi)))
        .collect()
}
