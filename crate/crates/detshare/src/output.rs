//! Metrics as JSON, per-request latencies as CSV.
//!
//! Rationals are written as decimal strings rounded to nine places.

use std::io::Write;

use detshare_core::metrics::{request_latency, Distribution, MetricsReport};
use detshare_core::rational::render;
use detshare_core::report::SimulationReport;
use detshare_core::Rational;
use serde_json::{json, Map, Value};

pub const DIGITS: usize = 9;

pub fn num(q: &Rational) -> Value {
    Value::from(render(q, DIGITS))
}

fn opt(q: &Option<Rational>) -> Value {
    q.as_ref().map_or(Value::Null, num)
}

fn dist(d: &Option<Distribution>) -> Value {
    match d {
        None => Value::Null,
        Some(d) => json!({
            "count": d.count,
            "mean": num(&d.mean),
            "p50": num(&d.p50),
            "p90": num(&d.p90),
            "p99": num(&d.p99),
            "max": num(&d.max),
        }),
    }
}

pub fn metrics_json(m: &MetricsReport) -> Value {
    let overhead: Map<String, Value> = m.overhead.iter().map(|(k, v)| (k.name().to_string(), num(v))).collect();
    let jobs: Vec<Value> = m
        .jobs
        .iter()
        .map(|j| json!({"job": j.job, "throughput": num(&j.throughput), "normalized": opt(&j.normalized)}))
        .collect();
    json!({
        "policy": m.policy,
        "makespan": num(&m.makespan),
        "requests": m.requests,
        "completed_requests": m.completed_requests,
        "request_throughput": num(&m.request_throughput),
        "training_iterations": num(&m.training_iterations),
        "iteration_throughput": num(&m.iteration_throughput),
        "ttft": dist(&m.ttft),
        "tpot": dist(&m.tpot),
        "e2e": dist(&m.e2e),
        "tpot_excluded": m.tpot_excluded,
        "ttft_violations": m.ttft_violations,
        "ttft_violation_rate": opt(&m.ttft_violation_rate),
        "tpot_violations": m.tpot_violations,
        "tpot_violation_rate": opt(&m.tpot_violation_rate),
        "overhead": overhead,
        "overhead_total": num(&m.overhead_total),
        "jobs": jobs,
        "aggregate_normalized": opt(&m.aggregate_normalized),
        "failed": m.failed,
        "stranded": m.stranded,
        "preemptions": m.preemptions,
        "migrations": m.migrations,
    })
}

/// One row per completed inference request:
/// `job,arrival,ttft,tpot,e2e,ttft_violated,tpot_violated`.
pub fn write_latency_csv(report: &SimulationReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "job,arrival,ttft,tpot,e2e,ttft_violated,tpot_violated")?;
    let flag = |b: Option<bool>| b.map_or(String::new(), |b| b.to_string());
    for v in &report.vctxs {
        let Some(l) = request_latency(v) else { continue };
        let tpot = l.tpot.as_ref().map_or(String::new(), |t| render(t, DIGITS));
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            l.job,
            render(&v.arrival, DIGITS),
            render(&l.ttft, DIGITS),
            tpot,
            render(&l.e2e, DIGITS),
            flag(l.ttft_violated),
            flag(l.tpot_violated)
        )?;
    }
    Ok(())
}
