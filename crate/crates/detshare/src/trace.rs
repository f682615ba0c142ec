//! Request traces as JSON Lines.
//!
//! ```text
//! {"arrival_time":"0.25","job_id":0,"kind":"inference","prompt_tokens":512,"output_tokens":64,
//!  "slo":{"ttft":"20","tpot":"1.5"},"priority_class":"latency-critical"}
//! {"arrival_time":"3","job_id":1,"kind":"training","iterations":40}
//! ```

use std::io::{BufRead, Write};

use detshare_core::model::{PriorityClass, SloSpec};
use detshare_core::workload::{RequestKind, RequestRecord};
use detshare_core::Rational;
use serde::{Deserialize, Serialize};

use crate::decimal;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Latency objectives as they appear in traces and configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloJson {
    #[serde(with = "decimal")]
    pub ttft: Rational,
    #[serde(with = "decimal")]
    pub tpot: Rational,
    #[serde(default, with = "decimal::option", skip_serializing_if = "Option::is_none")]
    pub e2e: Option<Rational>,
}

impl SloJson {
    pub fn to_spec(&self) -> Result<SloSpec, String> {
        SloSpec::new(self.ttft.clone(), self.tpot.clone(), self.e2e.clone()).map_err(|e| e.to_string())
    }

    pub fn from_spec(s: &SloSpec) -> Self {
        SloJson { ttft: s.ttft_deadline.clone(), tpot: s.tpot_deadline.clone(), e2e: s.e2e_deadline.clone() }
    }
}

pub fn parse_priority(name: &str) -> Result<PriorityClass, String> {
    match name {
        "latency-critical" | "lc" => Ok(PriorityClass::LatencyCritical),
        "best-effort" | "be" => Ok(PriorityClass::BestEffort),
        _ => Err(format!("unknown priority class {name:?} (expected latency-critical or best-effort)")),
    }
}

/// Inference requests default to latency-critical, training to best-effort.
pub fn default_priority(kind: &RequestKind) -> PriorityClass {
    match kind {
        RequestKind::Inference { .. } => PriorityClass::LatencyCritical,
        RequestKind::Training { .. } => PriorityClass::BestEffort,
    }
}

/// A request without its arrival time and job id: one trace line's
/// payload, also used as a generator template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestJson {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slo: Option<SloJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority_class: Option<String>,
}

impl RequestJson {
    pub fn record(&self, arrival: Rational, job: u32) -> Result<RequestRecord, String> {
        if arrival < detshare_core::rational::zero() {
            return Err(format!("negative arrival time {}", decimal::exact(&arrival)));
        }
        let need = |v: Option<u32>, name: &str| v.ok_or_else(|| format!("{} request without {name}", self.kind));
        let kind = match self.kind.as_str() {
            "inference" => RequestKind::Inference {
                prompt_tokens: need(self.prompt_tokens, "prompt_tokens")?,
                output_tokens: need(self.output_tokens, "output_tokens")?,
            },
            "training" => RequestKind::Training { iterations: need(self.iterations, "iterations")? },
            other => return Err(format!("unknown request kind {other:?} (expected inference or training)")),
        };
        let priority = match &self.priority_class {
            Some(p) => parse_priority(p)?,
            None => default_priority(&kind),
        };
        let slo = self.slo.as_ref().map(SloJson::to_spec).transpose()?;
        let record = RequestRecord { arrival, job, kind, slo, priority };
        record.validate().map_err(|e| e.to_string())?;
        Ok(record)
    }

    pub fn of(r: &RequestRecord) -> Self {
        let (prompt_tokens, output_tokens, iterations) = match r.kind {
            RequestKind::Inference { prompt_tokens, output_tokens } => (Some(prompt_tokens), Some(output_tokens), None),
            RequestKind::Training { iterations } => (None, None, Some(iterations)),
        };
        RequestJson {
            kind: r.kind.name().into(),
            prompt_tokens,
            output_tokens,
            iterations,
            slo: r.slo.as_ref().map(SloJson::from_spec),
            priority_class: Some(r.priority.name().into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    #[serde(with = "decimal")]
    pub arrival_time: Rational,
    pub job_id: u32,
    #[serde(flatten)]
    pub request: RequestJson,
}

impl TraceLine {
    pub fn record(&self) -> Result<RequestRecord, String> {
        self.request.record(self.arrival_time.clone(), self.job_id)
    }

    pub fn of(r: &RequestRecord) -> Self {
        TraceLine { arrival_time: r.arrival.clone(), job_id: r.job, request: RequestJson::of(r) }
    }
}

/// Reads a trace, sorted by arrival time (stable, so equal arrivals keep
/// file order). Blank lines are skipped.
pub fn parse_trace(input: impl BufRead) -> Result<Vec<RequestRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| TraceError::Parse { line: i + 1, message };
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        out.push(parsed.record().map_err(fail)?);
    }
    out.sort_by(|a, b| a.arrival.cmp(&b.arrival));
    Ok(out)
}

pub fn write_trace(records: &[RequestRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &TraceLine::of(r))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
