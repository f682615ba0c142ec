//! Latency and throughput metrics over a simulation report.
//!
//! Percentiles use the nearest-rank rule: the p-th percentile of `n` sorted
//! samples is the sample at 1-based rank `ceil(p/100 * n)` (rank 1 for
//! p = 0).

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use num_traits::Zero;

use crate::model::{VctxId, VctxStatus};
use crate::rational::{self, Rational};
use crate::report::{SimulationReport, VctxOutcome};
use crate::runtime::OverheadKind;
use crate::scenario::JobKind;

/// Nearest-rank percentile of already sorted samples.
pub fn nearest_rank(sorted: &[Rational], p: u32) -> Option<Rational> {
    if sorted.is_empty() || p > 100 {
        return None;
    }
    let n = sorted.len() as u64;
    let rank = (p as u64 * n).div_ceil(100).max(1);
    Some(sorted[rank as usize - 1].clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distribution {
    pub count: usize,
    pub mean: Rational,
    pub p50: Rational,
    pub p90: Rational,
    pub p99: Rational,
    pub max: Rational,
}

impl Distribution {
    pub fn of(samples: &[Rational]) -> Option<Self> {
        let mut sorted = samples.to_vec();
        sorted.sort();
        let max = sorted.last()?.clone();
        let sum = sorted.iter().fold(Rational::zero(), |a, x| a + x);
        Some(Distribution {
            count: sorted.len(),
            mean: sum / rational::int(sorted.len() as i64),
            p50: nearest_rank(&sorted, 50)?,
            p90: nearest_rank(&sorted, 90)?,
            p99: nearest_rank(&sorted, 99)?,
            max,
        })
    }
}

/// Latency of one inference request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestLatency {
    pub vctx: VctxId,
    pub job: u32,
    pub ttft: Rational,
    /// Undefined for a single output token.
    pub tpot: Option<Rational>,
    pub e2e: Rational,
    pub ttft_violated: Option<bool>,
    pub tpot_violated: Option<bool>,
}

/// TTFT runs from arrival to the first decode completion; TPOT averages the
/// gaps between decode completions after the first.
pub fn request_latency(v: &VctxOutcome) -> Option<RequestLatency> {
    let JobKind::Inference { .. } = v.kind else { return None };
    if v.status != VctxStatus::Completed {
        return None;
    }
    let first = v.decode_completions.first()?;
    let last = v.decode_completions.last()?;
    let ttft = first - &v.arrival;
    let tpot = match v.decode_completions.len() {
        0 | 1 => None,
        n => Some((last - first) / rational::int(n as i64 - 1)),
    };
    let e2e = v.completion.as_ref()? - &v.arrival;
    let ttft_violated = v.slo.as_ref().map(|s| ttft > s.ttft_deadline);
    let tpot_violated = match (&v.slo, &tpot) {
        (Some(s), Some(t)) => Some(*t > s.tpot_deadline),
        _ => None,
    };
    Some(RequestLatency { vctx: v.vctx, job: v.job, ttft, tpot, e2e, ttft_violated, tpot_violated })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobThroughput {
    pub job: u32,
    pub vctx: VctxId,
    /// Work items per unit time: kernels retired over time since arrival.
    pub throughput: Rational,
    /// Relative to running alone on a full device; present only with a
    /// paired exclusive run.
    pub normalized: Option<Rational>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsReport {
    pub policy: alloc::string::String,
    pub makespan: Rational,
    pub requests: usize,
    pub completed_requests: usize,
    pub request_throughput: Rational,
    pub training_iterations: Rational,
    pub iteration_throughput: Rational,
    pub ttft: Option<Distribution>,
    pub tpot: Option<Distribution>,
    pub e2e: Option<Distribution>,
    /// Requests whose TPOT is undefined because they produced one token.
    pub tpot_excluded: usize,
    pub ttft_violations: usize,
    pub ttft_violation_rate: Option<Rational>,
    pub tpot_violations: usize,
    pub tpot_violation_rate: Option<Rational>,
    pub overhead: BTreeMap<OverheadKind, Rational>,
    pub overhead_total: Rational,
    pub jobs: Vec<JobThroughput>,
    /// Sum of normalized throughputs over all jobs.
    pub aggregate_normalized: Option<Rational>,
    pub failed: usize,
    pub stranded: usize,
    pub preemptions: usize,
    pub migrations: usize,
}

fn ratio_of(num: usize, den: usize) -> Option<Rational> {
    (den > 0).then(|| rational::ratio(num as i64, den as i64))
}

/// Kernels retired per unit time since arrival, or `None` if no time passed.
fn job_rate(v: &VctxOutcome, end: &Rational) -> Option<Rational> {
    let until = v.completion.as_ref().unwrap_or(end);
    let elapsed = until - &v.arrival;
    (elapsed > Rational::zero()).then(|| rational::int(v.logical_progress as i64) / elapsed)
}

/// Metrics of `report`; `exclusive` is the paired run of the same contexts
/// on private full devices, used for normalized throughput.
pub fn compute_metrics(report: &SimulationReport, exclusive: Option<&SimulationReport>) -> MetricsReport {
    let start = report.vctxs.iter().map(|v| v.arrival.clone()).min().unwrap_or_else(Rational::zero);
    let makespan = &report.end_time - start;
    let per_time = |x: Rational| if makespan > Rational::zero() { x / &makespan } else { Rational::zero() };

    let inference: Vec<&VctxOutcome> =
        report.vctxs.iter().filter(|v| matches!(v.kind, JobKind::Inference { .. })).collect();
    let latencies: Vec<RequestLatency> = inference.iter().filter_map(|v| request_latency(v)).collect();
    let ttfts: Vec<Rational> = latencies.iter().map(|l| l.ttft.clone()).collect();
    let tpots: Vec<Rational> = latencies.iter().filter_map(|l| l.tpot.clone()).collect();
    let e2es: Vec<Rational> = latencies.iter().map(|l| l.e2e.clone()).collect();
    let ttft_judged = latencies.iter().filter(|l| l.ttft_violated.is_some()).count();
    let ttft_violations = latencies.iter().filter(|l| l.ttft_violated == Some(true)).count();
    let tpot_judged = latencies.iter().filter(|l| l.tpot_violated.is_some()).count();
    let tpot_violations = latencies.iter().filter(|l| l.tpot_violated == Some(true)).count();

    let mut iterations = Rational::zero();
    for v in &report.vctxs {
        if let JobKind::Training { iterations: n } = v.kind {
            if v.kernels > 0 {
                iterations += rational::ratio(v.logical_progress as i64 * n as i64, v.kernels as i64);
            }
        }
    }

    let mut overhead = BTreeMap::new();
    for e in &report.ledger {
        *overhead.entry(e.kind).or_insert_with(Rational::zero) += &e.amount;
    }

    let baseline: BTreeMap<VctxId, &VctxOutcome> =
        exclusive.map(|x| x.vctxs.iter().map(|v| (v.vctx, v)).collect()).unwrap_or_default();
    let jobs: Vec<JobThroughput> = report
        .vctxs
        .iter()
        .map(|v| {
            let throughput = job_rate(v, &report.end_time).unwrap_or_else(Rational::zero);
            let normalized = exclusive.and_then(|x| {
                let alone = job_rate(baseline.get(&v.vctx)?, &x.end_time)?;
                (!alone.is_zero()).then(|| &throughput / alone)
            });
            JobThroughput { job: v.job, vctx: v.vctx, throughput, normalized }
        })
        .collect();
    let aggregate_normalized = exclusive.map(|_| {
        jobs.iter().filter_map(|j| j.normalized.clone()).fold(Rational::zero(), |a, x| a + x)
    });

    MetricsReport {
        policy: report.policy.clone(),
        requests: inference.len(),
        completed_requests: latencies.len(),
        request_throughput: per_time(rational::int(latencies.len() as i64)),
        iteration_throughput: per_time(iterations.clone()),
        training_iterations: iterations,
        makespan,
        ttft: Distribution::of(&ttfts),
        tpot: Distribution::of(&tpots),
        e2e: Distribution::of(&e2es),
        tpot_excluded: latencies.iter().filter(|l| l.tpot.is_none()).count(),
        ttft_violations,
        ttft_violation_rate: ratio_of(ttft_violations, ttft_judged),
        tpot_violations,
        tpot_violation_rate: ratio_of(tpot_violations, tpot_judged),
        overhead_total: overhead.values().fold(Rational::zero(), |a, x| a + x),
        overhead,
        jobs,
        aggregate_normalized,
        failed: report.vctxs.iter().filter(|v| v.status == VctxStatus::Failed).count(),
        stranded: report.vctxs.iter().filter(|v| v.status == VctxStatus::Stranded).count(),
        preemptions: report.preemptions.len(),
        migrations: report.migrations.len(),
    }
}

impl MetricsReport {
    /// Relative reduction of `other`'s TPOT violation rate versus this one.
    pub fn tpot_reduction(&self, other: &MetricsReport) -> Option<Rational> {
        let base = self.tpot_violation_rate.clone()?;
        let new = other.tpot_violation_rate.clone()?;
        (!base.is_zero()).then(|| (&base - new) / base)
    }

    pub fn normalized_of(&self, vctx: VctxId) -> Option<&Rational> {
        self.jobs.iter().find(|j| j.vctx == vctx)?.normalized.as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.requests == 0 && self.jobs.is_empty()
    }
}
