//! Divergence sweeps: the same input vector reduced with one chunk and
//! with `g` chunks, across seeds.
//!
//! CSV columns: `format,n,g_i,g_j,seed,delta`. `delta` is the exact
//! absolute difference (floats are dyadic, so it always has a finite
//! decimal expansion), or `nan` when a result is not finite.

use std::io::Write;

use detshare_core::determinism::{coupling_delta, uniform_inputs, FloatFormat, PlanError, ReductionPlan};
use detshare_core::Rational;

use crate::decimal::exact;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepRow {
    pub format: FloatFormat,
    pub n: usize,
    pub g_i: usize,
    pub g_j: usize,
    pub seed: u64,
    pub delta: Option<Rational>,
}

/// Inputs are uniform on (-1, 1). Seeds run from 0 to `seeds - 1`; each
/// split `g` is compared against a single-chunk reduction.
pub fn divergence_sweep(format: FloatFormat, n: usize, splits: &[usize], seeds: u64) -> Result<Vec<SweepRow>, PlanError> {
    let reference = ReductionPlan::balanced(n, 1)?;
    let plans = splits.iter().map(|&g| ReductionPlan::balanced(n, g)).collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(splits.len() * seeds as usize);
    for seed in 0..seeds {
        let values = uniform_inputs(format, n, -1.0, 1.0, seed);
        for (plan, &g) in plans.iter().zip(splits) {
            let d = coupling_delta(&values, format, &reference, plan)?;
            rows.push(SweepRow { format, n, g_i: 1, g_j: g, seed, delta: d.delta });
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "format,n,g_i,g_j,seed,delta")?;
    for r in rows {
        let delta = r.delta.as_ref().map_or_else(|| "nan".to_string(), exact);
        writeln!(out, "{},{},{},{},{},{}", r.format, r.n, r.g_i, r.g_j, r.seed, delta)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_seed_and_split() {
        let rows = divergence_sweep(FloatFormat::Fp16, 64, &[1, 2, 8], 4).unwrap();
        assert_eq!(rows.len(), 12);
        // Splitting into one chunk is the reference itself.
        assert!(rows.iter().filter(|r| r.g_j == 1).all(|r| r.delta == Some(Rational::default())));
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.lines().nth(1).unwrap().starts_with("fp16,64,1,1,0,"));
    }

    #[test]
    fn oversized_splits_are_rejected() {
        assert!(divergence_sweep(FloatFormat::Fp16, 4, &[8], 1).is_err());
    }
}
