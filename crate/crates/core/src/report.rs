//! What a simulation run produced.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Zero;

use crate::determinism::FloatValue;
use crate::fault::{FaultOutcome, HangDetection, QuarantineState};
use crate::model::{KernelId, PctxId, Phase, PriorityClass, QuotaTier, Signature, SloSpec, VctxId, VctxStatus};
use crate::policy::{Hook, PolicyError};
use crate::rational::Rational;
use crate::runtime::{LedgerEntry, MigrationRecord, OverheadKind, PreemptionRecord};
use crate::scenario::JobKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TranscriptKind {
    Start,
    Resume,
    Pause,
    Finish,
    /// Execution abandoned because its context failed or was stranded.
    Abort,
}

impl TranscriptKind {
    pub fn name(self) -> &'static str {
        match self {
            TranscriptKind::Start => "start",
            TranscriptKind::Resume => "resume",
            TranscriptKind::Pause => "pause",
            TranscriptKind::Finish => "finish",
            TranscriptKind::Abort => "abort",
        }
    }
}

/// One execution step of one kernel, with the launch record as executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub time: Rational,
    pub kind: TranscriptKind,
    pub vctx: VctxId,
    pub kernel: KernelId,
    pub pctx: PctxId,
    pub signature: Signature,
}

/// A stretch of time at constant slowdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecInterval {
    pub start: Rational,
    pub end: Rational,
    pub factor: Rational,
}

impl ExecInterval {
    /// Work retired during the interval.
    pub fn work(&self) -> Rational {
        (&self.end - &self.start) / &self.factor
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelExecution {
    pub kernel: KernelId,
    pub vctx: VctxId,
    pub phase: Phase,
    pub base_duration: Rational,
    /// Work the kernel had to retire; exceeds the base duration when a
    /// soft hang stretched it.
    pub work_target: Rational,
    /// The launch record as it ran; only differs from the declared one
    /// under a launch rewriter.
    pub executed: Option<Signature>,
    /// When the launch first became ready.
    pub ready: Option<Rational>,
    /// First dispatch onto a physical context.
    pub dispatched: Option<Rational>,
    /// First moment it retired work.
    pub started: Option<Rational>,
    pub finished: Option<Rational>,
    pub intervals: Vec<ExecInterval>,
    pub preemptions: u32,
    pub pctxs: Vec<PctxId>,
    pub result: Option<FloatValue>,
}

impl KernelExecution {
    pub fn retired_work(&self) -> Rational {
        self.intervals.iter().fold(Rational::zero(), |a, i| a + i.work())
    }

    /// Wall time spent computing.
    pub fn busy_time(&self) -> Rational {
        self.intervals.iter().fold(Rational::zero(), |a, i| a + (&i.end - &i.start))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VctxOutcome {
    pub vctx: VctxId,
    pub job: u32,
    pub priority: PriorityClass,
    pub kind: JobKind,
    pub arrival: Rational,
    pub slo: Option<SloSpec>,
    pub status: VctxStatus,
    pub completion: Option<Rational>,
    pub prefill_completion: Option<Rational>,
    pub decode_completions: Vec<Rational>,
    pub logical_progress: u64,
    pub kernels: usize,
    /// Tier of every physical context it was bound to, in order.
    pub tiers: Vec<QuotaTier>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingRecord {
    pub time: Rational,
    pub vctx: VctxId,
    pub pctx: PctxId,
    pub tier: QuotaTier,
    pub bound: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyErrorRecord {
    pub time: Rational,
    pub hook: Hook,
    pub vctx: Option<VctxId>,
    pub error: PolicyError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogValue {
    Int(i64),
    Text(String),
    Time(Rational),
    Bool(bool),
    List(Vec<LogValue>),
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub time: Rational,
    pub seq: u64,
    pub kind: &'static str,
    pub fields: Vec<(&'static str, LogValue)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SimulationReport {
    pub policy: String,
    pub end_time: Rational,
    pub events_processed: u64,
    pub executions: Vec<KernelExecution>,
    pub transcript: Vec<TranscriptEntry>,
    pub migrations: Vec<MigrationRecord>,
    pub preemptions: Vec<PreemptionRecord>,
    pub ledger: Vec<LedgerEntry>,
    pub faults: Vec<FaultOutcome>,
    pub hangs: Vec<HangDetection>,
    pub quarantines: Vec<QuarantineState>,
    pub policy_errors: Vec<PolicyErrorRecord>,
    pub vctxs: Vec<VctxOutcome>,
    pub bindings: Vec<BindingRecord>,
    pub log: Vec<LogEntry>,
    /// Contexts with work left when nothing more could happen.
    pub stalled: Vec<VctxId>,
    pub deferrals: u64,
}

impl SimulationReport {
    pub fn execution(&self, kernel: KernelId) -> Option<&KernelExecution> {
        self.executions.get(kernel.0 as usize).filter(|e| e.kernel == kernel)
    }

    /// Signatures of the kernels `vctx` started, in program order.
    pub fn executed_signatures(&self, vctx: VctxId) -> Vec<Signature> {
        self.transcript
            .iter()
            .filter(|e| e.vctx == vctx && e.kind == TranscriptKind::Start)
            .map(|e| e.signature)
            .collect()
    }

    /// Transcript entries of one context.
    pub fn transcript_of(&self, vctx: VctxId) -> Vec<&TranscriptEntry> {
        self.transcript.iter().filter(|e| e.vctx == vctx).collect()
    }

    pub fn reduction_results(&self) -> BTreeMap<KernelId, FloatValue> {
        self.executions.iter().filter_map(|e| e.result.map(|r| (e.kernel, r))).collect()
    }

    pub fn overhead(&self, kind: Option<OverheadKind>) -> Rational {
        crate::runtime::ledger_total(&self.ledger, kind)
    }

    pub fn completed(&self) -> impl Iterator<Item = &VctxOutcome> + '_ {
        self.vctxs.iter().filter(|v| v.status == VctxStatus::Completed)
    }
}

macro_rules! int_value {
    ($($t:ty),*) => {$(
        impl From<$t> for LogValue {
            fn from(x: $t) -> Self {
                LogValue::Int(x as i64)
            }
        }
    )*};
}

int_value!(i64, u32, u64, usize);

macro_rules! id_value {
    ($($t:ty),*) => {$(
        impl From<$t> for LogValue {
            fn from(x: $t) -> Self {
                LogValue::Int(x.0 as i64)
            }
        }
    )*};
}

id_value!(VctxId, PctxId, KernelId, crate::model::DeviceId, crate::model::RegionId);

impl From<bool> for LogValue {
    fn from(x: bool) -> Self {
        LogValue::Bool(x)
    }
}

impl From<&str> for LogValue {
    fn from(x: &str) -> Self {
        LogValue::Text(x.into())
    }
}

impl From<String> for LogValue {
    fn from(x: String) -> Self {
        LogValue::Text(x)
    }
}

impl From<Rational> for LogValue {
    fn from(x: Rational) -> Self {
        LogValue::Time(x)
    }
}

impl From<&Rational> for LogValue {
    fn from(x: &Rational) -> Self {
        LogValue::Time(x.clone())
    }
}

impl<T: Into<LogValue>> From<Option<T>> for LogValue {
    fn from(x: Option<T>) -> Self {
        match x {
            Some(v) => v.into(),
            None => LogValue::List(Vec::new()),
        }
    }
}

impl<T: Into<LogValue>> From<Vec<T>> for LogValue {
    fn from(xs: Vec<T>) -> Self {
        LogValue::List(xs.into_iter().map(Into::into).collect())
    }
}
