//! Discrete-event engine.
//!
//! Time and work are exact rationals. Events at one timestamp run in
//! enqueue order; once none are left at that time a scheduling round runs:
//! completion and congestion hooks, placement of contexts evacuated from a
//! failed device, quarantine placement, then every ready launch is offered
//! to the policy in the policy's order.
//!
//! Kernels retire work at rate `1 / factor`, where the factor comes from
//! [`speed::kernel_speed`]. Whenever a kernel on a device starts, pauses or
//! finishes, every computing kernel on that device is credited for the work
//! it retired and re-priced under the new contention.

pub mod queue;
pub mod speed;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::{One, Zero};

use crate::determinism::kernel_reduction_result;
use crate::fault::{
    detect_soft_hang, hang_reference, FaultEffect, FaultKind, FaultOutcome, FaultSpec, FaultTarget, HangDetection,
    QuarantineState,
};
use crate::model::{
    Cluster, Kernel, KernelId, MemoryRegion, ModelError, PctxId, Phase, QuotaTier, RegionId, Signature, VctxId,
    VctxStatus, VirtualContext,
};
use crate::policy::predictor::InvalidAlpha;
use crate::policy::{
    self, CompletionInfo, DurationPredictor, HeadView, Hook, LaunchInfo, PctxView, Policy, PolicyDecision, PolicyError,
    PolicyView, QueuedView, RunningView, VctxView,
};
use crate::rational::{self, Rational};
use crate::report::{
    BindingRecord, ExecInterval, KernelExecution, LogEntry, LogValue, PolicyErrorRecord, SimulationReport,
    TranscriptEntry, TranscriptKind, VctxOutcome,
};
use crate::runtime::{
    compute_migration_set, full_copy_set, next_boundary, plan_migration, segment_work, CostParameters, DispatchOutcome,
    LazyPlan, LedgerEntry, MigrationSet, OverheadKind, PreemptionRecord, RuntimeError,
};
use crate::scenario::{EngineConfig, JobKind, Scenario, ScenarioError};

pub use queue::{CausalityViolation, EventQueue};
pub use speed::{kernel_speed, speed_factor, ContentionSnapshot};

/// Rewrites a launch record just before it first executes. A correct
/// scheduler never does this; it exists to show what breaks when one does.
pub trait LaunchRewriter {
    fn rewrite(&self, kernel: &Kernel, tier: &QuotaTier) -> Signature;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Causality(#[from] CausalityViolation),
    #[error("event budget of {limit} exceeded at t={time}")]
    EventBudgetExceeded { limit: u64, time: Rational },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Predictor(#[from] InvalidAlpha),
    #[error("policy configuration: {0}")]
    PolicyConfig(PolicyError),
    #[error("transcript diverged from the expected one at entry {position} (t={time})")]
    TranscriptMismatch { position: usize, time: Rational },
    #[error("engine invariant violated: {0}")]
    Internal(String),
}

fn internal(msg: &str) -> EngineError {
    EngineError::Internal(msg.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    Arrival(VctxId),
    LaunchReady(VctxId, u64),
    KernelStart(PctxId, u64),
    KernelFinish(PctxId, u64),
    PreemptBoundary(PctxId, u64),
    YieldDone(PctxId, u64),
    MigrationDone(VctxId, u64),
    LazyCopy(VctxId, u64),
    Fault(usize),
    HangCheck(PctxId, u64),
    PctxReset(PctxId),
    Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum VState {
    NotArrived,
    /// Host-side think time before the next launch.
    Gap,
    /// Head launch awaits a dispatch decision.
    Ready,
    Migrating {
        dst: PctxId,
        record: usize,
        /// Head launch is ready and dispatches on arrival.
        launch_ready: bool,
    },
    Executing,
    /// Head kernel paused at a boundary; the context is being handed back.
    Yielding,
    /// Evacuated from a failed device, waiting for a standby context.
    Evacuee { tier: QuotaTier, launch_ready: bool },
    Done,
}

#[derive(Debug, Clone)]
struct LazyState {
    plan: LazyPlan,
    gen: u64,
}

#[derive(Debug, Clone)]
struct VRuntime {
    state: VState,
    launch_gen: u64,
    mig_gen: u64,
    ready_since: Rational,
    last_pctx: Option<PctxId>,
    executed_any: bool,
    lazy: Option<LazyState>,
    last_migration: Option<usize>,
    prefill_done: Option<Rational>,
    decode_done: Vec<Rational>,
    completion: Option<Rational>,
    tiers: Vec<QuotaTier>,
    quarantined: bool,
}

impl Default for VRuntime {
    fn default() -> Self {
        VRuntime {
            state: VState::NotArrived,
            launch_gen: 0,
            mig_gen: 0,
            ready_since: Rational::zero(),
            last_pctx: None,
            executed_any: false,
            lazy: None,
            last_migration: None,
            prefill_done: None,
            decode_done: Vec::new(),
            completion: None,
            tiers: Vec::new(),
            quarantined: false,
        }
    }
}

#[derive(Debug, Clone)]
struct KState {
    retired: Rational,
    target: Rational,
    stretched: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum RunPhase {
    /// Context switch and demand faults before the first instruction.
    Setup { until: Rational },
    Compute,
}

#[derive(Debug, Clone)]
struct Run {
    vctx: VctxId,
    kernel: KernelId,
    phase: RunPhase,
    factor: Rational,
    since: Rational,
    gen: u64,
    run_id: u64,
    compute_start: Option<Rational>,
    hang_reference: Option<Rational>,
    /// Work mark at which a pending preemption pauses the kernel.
    boundary: Option<Rational>,
    /// Setup charges in the order they elapse.
    setup: Vec<SetupStep>,
}

/// One piece of a kernel's setup and how to take it back if a preemption
/// cuts the setup short.
#[derive(Debug, Clone)]
struct SetupStep {
    ledger: usize,
    amount: Rational,
    undo: Undo,
}

#[derive(Debug, Clone)]
enum Undo {
    Fault { region: RegionId, was_dirty: bool },
    Switch { last_vctx: Option<VctxId>, last_pctx: Option<PctxId> },
}

#[derive(Debug, Clone, Default)]
struct PctxRt {
    run: Option<Run>,
    drain: Option<u64>,
    preempt: Option<usize>,
    resetting: bool,
    last_vctx: Option<VctxId>,
    bound_since: Option<Rational>,
    /// Soft hang waiting for the next kernel: stretch and fault outcome index.
    stretch: Option<(Rational, usize)>,
}

#[derive(Debug, Clone)]
struct DeviceRt {
    failed: bool,
    /// Standby devices stay hidden until a device-wide fault.
    active: bool,
}

enum Verdict {
    Apply(PolicyDecision),
    Rejected(PolicyError),
    Fatal(PolicyError),
}

macro_rules! log_event {
    ($engine:expr, $kind:literal $(, $key:literal => $val:expr)* $(,)?) => {
        if $engine.cfg.record_log {
            let fields: Vec<(&'static str, LogValue)> = vec![$(($key, LogValue::from($val))),*];
            $engine.push_log($kind, fields);
        }
    };
}

pub struct Engine<'a> {
    cfg: EngineConfig,
    costs: CostParameters,
    cluster: Cluster,
    kernels: Vec<Kernel>,
    kstate: Vec<KState>,
    vctxs: Vec<VirtualContext>,
    kinds: Vec<JobKind>,
    vrt: Vec<VRuntime>,
    regions: BTreeMap<RegionId, MemoryRegion>,
    prt: BTreeMap<PctxId, PctxRt>,
    drt: Vec<DeviceRt>,
    faults: Vec<FaultSpec>,
    queue: EventQueue<Event>,
    policy: &'a dyn Policy,
    rewriter: Option<&'a dyn LaunchRewriter>,
    predictor: DurationPredictor,
    report: SimulationReport,
    gen: u64,
    log_seq: u64,
    tick: Option<Rational>,
    tick_fired: bool,
    completions: Vec<CompletionInfo>,
    expected: Option<Vec<TranscriptEntry>>,
}

/// Runs `scenario` under `policy` to quiescence.
pub fn simulate(scenario: &Scenario, policy: &dyn Policy) -> Result<SimulationReport, EngineError> {
    Engine::new(scenario, policy)?.run()
}

impl<'a> Engine<'a> {
    pub fn new(scenario: &Scenario, policy: &'a dyn Policy) -> Result<Self, EngineError> {
        let built = scenario.build()?;
        let cfg = scenario.engine.clone();
        let predictor = DurationPredictor::new(cfg.predictor_alpha.clone(), cfg.predictor_default.clone())?;
        let tick = cfg.tick.clone().or_else(|| policy.tick_period());
        if tick.as_ref().is_some_and(|t| t <= &Rational::zero()) {
            return Err(EngineError::PolicyConfig(PolicyError::Config("tick period must be positive".into())));
        }
        let kstate = built
            .kernels
            .iter()
            .map(|k| KState { retired: Rational::zero(), target: k.base_duration.clone(), stretched: false })
            .collect();
        let executions = built
            .kernels
            .iter()
            .map(|k| KernelExecution {
                kernel: k.id,
                vctx: k.vctx,
                phase: k.phase,
                base_duration: k.base_duration.clone(),
                work_target: k.base_duration.clone(),
                executed: None,
                ready: None,
                dispatched: None,
                started: None,
                finished: None,
                intervals: Vec::new(),
                preemptions: 0,
                pctxs: Vec::new(),
                result: None,
            })
            .collect();
        let prt = built.cluster.pctxs().map(|p| (p.id, PctxRt::default())).collect();
        let drt = built.cluster.devices.iter().map(|d| DeviceRt { failed: false, active: !d.standby }).collect();
        let report = SimulationReport { policy: policy.name().into(), executions, ..SimulationReport::default() };
        Ok(Engine {
            cfg,
            costs: scenario.costs.clone(),
            vrt: built.vctxs.iter().map(|_| VRuntime::default()).collect(),
            cluster: built.cluster,
            kernels: built.kernels,
            kstate,
            vctxs: built.vctxs,
            kinds: built.kinds,
            regions: built.regions,
            prt,
            drt,
            faults: scenario.faults.clone(),
            queue: EventQueue::new(),
            policy,
            rewriter: None,
            predictor,
            report,
            gen: 0,
            log_seq: 0,
            tick,
            tick_fired: false,
            completions: Vec::new(),
            expected: None,
        })
    }

    pub fn with_rewriter(mut self, rewriter: &'a dyn LaunchRewriter) -> Self {
        self.rewriter = Some(rewriter);
        self
    }

    /// Aborts the run with [`EngineError::TranscriptMismatch`] as soon as
    /// the transcript departs from `expected`.
    pub fn with_expected_transcript(mut self, expected: Vec<TranscriptEntry>) -> Self {
        self.expected = Some(expected);
        self
    }

    pub fn run(mut self) -> Result<SimulationReport, EngineError> {
        for i in 0..self.vctxs.len() {
            let t = self.vctxs[i].arrival.clone();
            self.queue.schedule(t, Event::Arrival(VctxId(i as u32)))?;
        }
        for i in 0..self.faults.len() {
            let t = self.faults[i].time.clone();
            self.queue.schedule(t, Event::Fault(i))?;
        }
        if let Some(t) = self.tick.clone() {
            if !self.vctxs.is_empty() {
                self.queue.schedule(t, Event::Tick)?;
            }
        }
        let mut processed = 0u64;
        while let Some(t) = self.queue.peek_time().cloned() {
            if self.all_terminal() {
                break;
            }
            while self.queue.peek_time() == Some(&t) {
                let (_, _, event) = self.queue.pop().expect("peeked");
                processed += 1;
                if processed > self.cfg.max_events {
                    return Err(EngineError::EventBudgetExceeded { limit: self.cfg.max_events, time: t });
                }
                self.handle(event)?;
                if self.cfg.check_invariants {
                    self.check_invariants()?;
                }
            }
            self.round()?;
            if self.cfg.check_invariants {
                self.check_invariants()?;
            }
            self.check_expected_progress(&t)?;
            if core::mem::take(&mut self.tick_fired) && !self.queue.is_empty() && !self.all_terminal() {
                let period = self.tick.clone().ok_or_else(|| internal("tick without a period"))?;
                self.queue.schedule(&t + period, Event::Tick)?;
            }
        }
        self.finish(processed)
    }

    fn finish(mut self, processed: u64) -> Result<SimulationReport, EngineError> {
        if let Some(exp) = &self.expected {
            if exp.len() != self.report.transcript.len() {
                return Err(EngineError::TranscriptMismatch {
                    position: self.report.transcript.len(),
                    time: self.now(),
                });
            }
        }
        self.report.end_time = self.now();
        self.report.events_processed = processed;
        for (i, v) in self.vctxs.iter().enumerate() {
            let rt = &self.vrt[i];
            if !v.status.is_terminal() {
                self.report.stalled.push(v.id);
            }
            self.report.vctxs.push(VctxOutcome {
                vctx: v.id,
                job: v.job,
                priority: v.priority,
                kind: self.kinds[i],
                arrival: v.arrival.clone(),
                slo: v.slo.clone(),
                status: v.status,
                completion: rt.completion.clone(),
                prefill_completion: rt.prefill_done.clone(),
                decode_completions: rt.decode_done.clone(),
                logical_progress: v.logical_progress,
                kernels: self.kernels.iter().filter(|k| k.vctx == v.id).count(),
                tiers: rt.tiers.clone(),
            });
        }
        Ok(self.report)
    }

    // ----- small helpers -------------------------------------------------

    fn now(&self) -> Rational {
        self.queue.now().clone()
    }

    fn next_gen(&mut self) -> u64 {
        self.gen += 1;
        self.gen
    }

    fn schedule(&mut self, time: Rational, event: Event) -> Result<(), EngineError> {
        self.queue.schedule(time, event)?;
        Ok(())
    }

    fn all_terminal(&self) -> bool {
        self.vctxs.iter().all(|v| v.status.is_terminal())
    }

    fn head(&self, v: VctxId) -> Option<KernelId> {
        self.vctxs[v.0 as usize].pending.front().copied()
    }

    fn tier(&self, p: PctxId) -> QuotaTier {
        self.cluster.pctx(p).expect("known pctx").tier.clone()
    }

    fn device_index(&self, p: PctxId) -> usize {
        self.cluster.pctx(p).expect("known pctx").device.0 as usize
    }

    fn rt(&mut self, p: PctxId) -> &mut PctxRt {
        self.prt.get_mut(&p).expect("known pctx")
    }

    fn usable_device(&self, di: usize) -> bool {
        self.drt[di].active && !self.drt[di].failed
    }

    /// Smallest tier among usable contexts.
    fn min_tier(&self) -> Option<QuotaTier> {
        self.cluster
            .devices
            .iter()
            .enumerate()
            .filter(|(i, _)| self.usable_device(*i))
            .flat_map(|(_, d)| d.pool.iter().map(|p| p.tier.clone()))
            .min()
    }

    fn push_log(&mut self, kind: &'static str, fields: Vec<(&'static str, LogValue)>) {
        let seq = self.log_seq;
        self.log_seq += 1;
        self.report.log.push(LogEntry { time: self.now(), seq, kind, fields });
    }

    fn charge(&mut self, kind: OverheadKind, v: VctxId, p: PctxId, k: Option<KernelId>, amount: Rational) {
        if amount.is_zero() {
            return;
        }
        log_event!(self, "overhead", "overhead" => kind.name(), "vctx" => v, "pctx" => p, "kernel" => k, "amount" => &amount);
        self.report.ledger.push(LedgerEntry { time: self.now(), kind, vctx: v, pctx: p, kernel: k, amount });
    }

    fn record(
        &mut self,
        kind: TranscriptKind,
        vctx: VctxId,
        kernel: KernelId,
        pctx: PctxId,
        signature: Signature,
    ) -> Result<(), EngineError> {
        let entry = TranscriptEntry { time: self.now(), kind, vctx, kernel, pctx, signature };
        if let Some(exp) = &self.expected {
            let position = self.report.transcript.len();
            if exp.get(position) != Some(&entry) {
                return Err(EngineError::TranscriptMismatch { position, time: entry.time });
            }
        }
        self.report.transcript.push(entry);
        Ok(())
    }

    /// Fails once an expected transcript entry is due and nothing left at
    /// this timestamp can still produce it.
    fn check_expected_progress(&self, t: &Rational) -> Result<(), EngineError> {
        let Some(exp) = &self.expected else { return Ok(()) };
        let position = self.report.transcript.len();
        if let Some(next) = exp.get(position) {
            if &next.time <= t && self.queue.peek_time().is_none_or(|n| n > t) {
                return Err(EngineError::TranscriptMismatch { position, time: t.clone() });
            }
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<(), EngineError> {
        self.cluster.check_invariants()?;
        for (p, rt) in &self.prt {
            if let Some(run) = &rt.run {
                if self.cluster.table().vctx_on(*p) != Some(run.vctx) {
                    return Err(EngineError::Internal(format!("{p} runs a kernel of an unbound context")));
                }
                let ks = &self.kstate[run.kernel.0 as usize];
                if ks.retired > ks.target {
                    return Err(EngineError::Internal(format!("{} retired more than its work", run.kernel)));
                }
            }
            if (rt.preempt.is_some() || rt.drain.is_some()) && self.cluster.table().vctx_on(*p).is_none() {
                return Err(EngineError::Internal(format!("{p} yields with nothing bound")));
            }
        }
        Ok(())
    }

    // ----- event dispatch ------------------------------------------------

    fn handle(&mut self, event: Event) -> Result<(), EngineError> {
        match event {
            Event::Arrival(v) => self.arrival(v),
            Event::LaunchReady(v, gen) => {
                let vi = v.0 as usize;
                if self.vrt[vi].launch_gen != gen {
                    return Ok(());
                }
                let now = self.now();
                match &mut self.vrt[vi].state {
                    VState::Gap => {
                        let k = self.head(v).ok_or_else(|| internal("ready launch without a kernel"))?;
                        self.make_ready(v, k);
                    }
                    VState::Migrating { launch_ready, .. } => {
                        *launch_ready = true;
                        self.vrt[vi].ready_since = now.clone();
                        if let Some(k) = self.head(v) {
                            self.report.executions[k.0 as usize].ready.get_or_insert(now);
                        }
                    }
                    _ => {}
                }
                Ok(())
            }
            Event::KernelStart(p, gen) => {
                let due = self.prt[&p]
                    .run
                    .as_ref()
                    .is_some_and(|r| r.gen == gen && matches!(r.phase, RunPhase::Setup { .. }));
                if due {
                    self.begin_compute(p)?;
                }
                Ok(())
            }
            Event::KernelFinish(p, gen) => {
                if self.prt[&p].run.as_ref().is_some_and(|r| r.gen == gen && r.phase == RunPhase::Compute) {
                    self.finish_kernel(p)?;
                }
                Ok(())
            }
            Event::PreemptBoundary(p, gen) => {
                if self.prt[&p].run.as_ref().is_some_and(|r| r.gen == gen && r.phase == RunPhase::Compute) {
                    self.pause_at_boundary(p)?;
                }
                Ok(())
            }
            Event::YieldDone(p, gen) => {
                if self.prt[&p].drain == Some(gen) {
                    self.complete_yield(p)?;
                }
                Ok(())
            }
            Event::MigrationDone(v, gen) => {
                if self.vrt[v.0 as usize].mig_gen == gen {
                    self.finish_migration(v)?;
                }
                Ok(())
            }
            Event::LazyCopy(v, gen) => {
                if self.vrt[v.0 as usize].lazy.as_ref().is_some_and(|l| l.gen == gen) {
                    self.halt_lazy(v);
                    let now = self.now();
                    self.resume_lazy(v, now)?;
                }
                Ok(())
            }
            Event::Fault(i) => self.apply_fault(i),
            Event::HangCheck(p, run_id) => self.hang_check(p, run_id),
            Event::PctxReset(p) => {
                self.rt(p).resetting = false;
                log_event!(self, "reset", "pctx" => p);
                Ok(())
            }
            Event::Tick => {
                self.tick_fired = true;
                log_event!(self, "tick");
                Ok(())
            }
        }
    }

    fn arrival(&mut self, v: VctxId) -> Result<(), EngineError> {
        let vi = v.0 as usize;
        self.vctxs[vi].status = VctxStatus::Active;
        log_event!(self, "arrival", "vctx" => v, "job" => self.vctxs[vi].job);
        match self.head(v) {
            None => self.complete_vctx(v),
            Some(k) => {
                self.make_ready(v, k);
                Ok(())
            }
        }
    }

    fn make_ready(&mut self, v: VctxId, k: KernelId) {
        let now = self.now();
        let rt = &mut self.vrt[v.0 as usize];
        rt.state = VState::Ready;
        rt.ready_since = now.clone();
        self.report.executions[k.0 as usize].ready.get_or_insert(now);
        log_event!(self, "launch-ready", "vctx" => v, "kernel" => k);
    }

    fn complete_vctx(&mut self, v: VctxId) -> Result<(), EngineError> {
        let vi = v.0 as usize;
        let now = self.now();
        self.vctxs[vi].status = VctxStatus::Completed;
        self.vrt[vi].state = VState::Done;
        self.vrt[vi].completion = Some(now);
        self.vrt[vi].lazy = None;
        log_event!(self, "vctx-complete", "vctx" => v);
        if let Some(p) = self.cluster.table().pctx_of(v) {
            if self.prt[&p].preempt.is_none() {
                self.release(v)?;
            }
        }
        Ok(())
    }

    fn bind(&mut self, v: VctxId, p: PctxId) -> Result<(), EngineError> {
        self.cluster.bind(v, p)?;
        let now = self.now();
        let tier = self.tier(p);
        self.rt(p).bound_since = Some(now.clone());
        self.vrt[v.0 as usize].tiers.push(tier.clone());
        self.report.bindings.push(BindingRecord { time: now, vctx: v, pctx: p, tier, bound: true });
        log_event!(self, "bind", "vctx" => v, "pctx" => p);
        Ok(())
    }

    fn release(&mut self, v: VctxId) -> Result<PctxId, EngineError> {
        let p = self.cluster.unbind(v)?;
        let now = self.now();
        let tier = self.tier(p);
        self.rt(p).bound_since = None;
        self.report.bindings.push(BindingRecord { time: now, vctx: v, pctx: p, tier, bound: false });
        log_event!(self, "unbind", "vctx" => v, "pctx" => p);
        Ok(p)
    }

    // ----- speed model ---------------------------------------------------

    fn computing_on(&self, di: usize) -> Vec<PctxId> {
        self.cluster.devices[di]
            .pool
            .iter()
            .map(|p| p.id)
            .filter(|p| self.prt[p].run.as_ref().is_some_and(|r| r.phase == RunPhase::Compute))
            .collect()
    }

    fn snapshot(&self, di: usize) -> ContentionSnapshot {
        let entries = self
            .computing_on(di)
            .into_iter()
            .map(|p| {
                let run = self.prt[&p].run.as_ref().expect("computing");
                (p, self.tier(p), self.kernels[run.kernel.0 as usize].mem_bw_demand.clone())
            })
            .collect();
        ContentionSnapshot { entries }
    }

    /// Credits a computing kernel with the work retired since its last
    /// re-pricing.
    fn credit(&mut self, p: PctxId) {
        let now = self.now();
        let Some(run) = self.prt.get_mut(&p).and_then(|rt| rt.run.as_mut()) else { return };
        if run.phase != RunPhase::Compute || now <= run.since {
            return;
        }
        let ki = run.kernel.0 as usize;
        let work = (&now - &run.since) / &run.factor;
        self.kstate[ki].retired += work;
        self.report.executions[ki].intervals.push(ExecInterval {
            start: run.since.clone(),
            end: now.clone(),
            factor: run.factor.clone(),
        });
        run.since = now;
    }

    /// Re-prices every computing kernel on a device and reschedules its
    /// next completion or preemption boundary.
    fn reprice(&mut self, di: usize) -> Result<(), EngineError> {
        let now = self.now();
        let ps = self.computing_on(di);
        for &p in &ps {
            self.credit(p);
        }
        let snapshot = self.snapshot(di);
        for &p in &ps {
            let tier = self.tier(p);
            let ki = self.prt[&p].run.as_ref().expect("computing").kernel.0 as usize;
            let factor = kernel_speed(&self.kernels[ki], p, &tier, &snapshot);
            let gen = self.next_gen();
            let rt = self.prt.get_mut(&p).expect("known pctx");
            let run = rt.run.as_mut().expect("computing");
            run.factor = factor.clone();
            run.gen = gen;
            let ks = &self.kstate[ki];
            match run.boundary.clone() {
                Some(b) => {
                    if let Some(idx) = rt.preempt {
                        let rec = &mut self.report.preemptions[idx];
                        rec.max_factor = rational::max(&rec.max_factor, &factor);
                    }
                    let t = &now + (b - &ks.retired) * &factor;
                    self.queue.schedule(t, Event::PreemptBoundary(p, gen))?;
                }
                None => {
                    let t = &now + (&ks.target - &ks.retired) * &factor;
                    self.queue.schedule(t, Event::KernelFinish(p, gen))?;
                }
            }
        }
        Ok(())
    }

    // ----- dispatch and execution ----------------------------------------

    fn dispatch_kernel(&mut self, v: VctxId, p: PctxId) -> Result<(), EngineError> {
        let now = self.now();
        let vi = v.0 as usize;
        let kid = self.head(v).ok_or_else(|| internal("dispatch without a pending kernel"))?;
        let ki = kid.0 as usize;
        {
            let exec = &mut self.report.executions[ki];
            exec.dispatched.get_or_insert(now.clone());
            if exec.pctxs.last() != Some(&p) {
                exec.pctxs.push(p);
            }
        }
        let mut setup = Rational::zero();
        let mut steps = Vec::new();

        let missing: Vec<RegionId> = self.kernels[ki]
            .touched
            .iter()
            .filter(|r| !self.regions[r].resident_on.contains(&p))
            .copied()
            .collect();
        if !missing.is_empty() {
            self.halt_lazy(v);
            let mut faults = 0u32;
            for r in missing {
                if self.regions[&r].resident_on.contains(&p) {
                    continue;
                }
                let pending = self.vrt[vi].lazy.as_mut().and_then(|l| l.plan.take(r));
                let bytes = pending.unwrap_or_else(|| rational::int(self.regions[&r].bytes as i64));
                let cost = self.costs.demand_fault_cost(&bytes);
                log_event!(self, "demand-fault", "vctx" => v, "pctx" => p, "region" => r, "bytes" => &bytes);
                let ledger = self.report.ledger.len();
                self.charge(OverheadKind::DemandFault, v, p, Some(kid), cost.clone());
                setup += &cost;
                let region = self.regions.get_mut(&r).expect("known region");
                steps.push(SetupStep { ledger, amount: cost, undo: Undo::Fault { region: r, was_dirty: region.dirty } });
                region.resident_on.insert(p);
                region.dirty = false;
                faults += 1;
            }
            if let Some(m) = self.vrt[vi].last_migration {
                self.report.migrations[m].demand_faults += faults;
            }
            self.resume_lazy(v, &now + &setup)?;
        }

        let di = self.device_index(p);
        let tier = self.tier(p);
        let factor = kernel_speed(&self.kernels[ki], p, &tier, &self.snapshot(di));
        let warm = self.prt[&p].last_vctx.is_none_or(|u| u == v) && self.vrt[vi].last_pctx.is_none_or(|q| q == p);
        if !warm {
            let effective = &self.kernels[ki].base_duration * &factor;
            let cost = self.costs.ctx_switch_cost(&effective, self.cfg.segments);
            let ledger = self.report.ledger.len();
            self.charge(OverheadKind::ContextSwitch, v, p, Some(kid), cost.clone());
            setup += &cost;
            let undo = Undo::Switch { last_vctx: self.prt[&p].last_vctx, last_pctx: self.vrt[vi].last_pctx };
            steps.push(SetupStep { ledger, amount: cost, undo });
        }
        self.rt(p).last_vctx = Some(v);
        self.vrt[vi].last_pctx = Some(p);
        self.cluster.pctx_mut(p)?.hw_queue.push_back(kid);
        self.vrt[vi].state = VState::Executing;

        let gen = self.next_gen();
        let run_id = self.next_gen();
        let phase = if setup.is_zero() {
            RunPhase::Compute
        } else {
            RunPhase::Setup { until: &now + &setup }
        };
        log_event!(self, "dispatch", "vctx" => v, "kernel" => kid, "pctx" => p, "setup" => &setup);
        self.rt(p).run = Some(Run {
            vctx: v,
            kernel: kid,
            phase: phase.clone(),
            factor,
            since: now.clone(),
            gen,
            run_id,
            compute_start: None,
            hang_reference: None,
            boundary: None,
            setup: steps,
        });
        match phase {
            RunPhase::Compute => self.begin_compute(p),
            RunPhase::Setup { until } => self.schedule(until, Event::KernelStart(p, gen)),
        }
    }

    fn begin_compute(&mut self, p: PctxId) -> Result<(), EngineError> {
        let now = self.now();
        let (v, kid) = {
            let run = self.prt[&p].run.as_ref().ok_or_else(|| internal("start without a run"))?;
            (run.vctx, run.kernel)
        };
        let (vi, ki) = (v.0 as usize, kid.0 as usize);

        // A signal that arrived during setup takes effect here: the start of
        // a kernel is a boundary.
        if self.prt[&p].preempt.is_some() {
            return self.yield_before_start(p);
        }

        if let Some((stretch, outcome)) = self.rt(p).stretch.take() {
            if self.kstate[ki].stretched {
                self.rt(p).stretch = Some((stretch, outcome));
            } else {
                let ks = &mut self.kstate[ki];
                ks.target = &ks.target * &stretch;
                ks.stretched = true;
                self.report.executions[ki].work_target = ks.target.clone();
                if let Some(o) = self.report.faults.get_mut(outcome) {
                    o.effect = FaultEffect::Stretched { kernel: Some(kid) };
                }
            }
        }

        let tier = self.tier(p);
        let (kind, signature) = match self.report.executions[ki].executed {
            Some(s) => (TranscriptKind::Resume, s),
            None => {
                let kernel = &self.kernels[ki];
                let s = self.rewriter.map_or(kernel.signature, |r| r.rewrite(kernel, &tier));
                let exec = &mut self.report.executions[ki];
                exec.executed = Some(s);
                exec.started = Some(now.clone());
                (TranscriptKind::Start, s)
            }
        };
        self.record(kind, v, kid, p, signature)?;
        log_event!(self, "kernel-start", "vctx" => v, "kernel" => kid, "pctx" => p, "resume" => kind == TranscriptKind::Resume);
        self.vrt[vi].executed_any = true;
        {
            let run = self.rt(p).run.as_mut().expect("run");
            run.phase = RunPhase::Compute;
            run.since = now.clone();
            run.compute_start = Some(now.clone());
        }
        self.reprice(self.device_index(p))?;

        if !self.vrt[vi].quarantined {
            let kernel = &self.kernels[ki];
            let ks = &self.kstate[ki];
            let run = self.prt[&p].run.as_ref().expect("run");
            let share = (&ks.target - &ks.retired) / &ks.target;
            let predicted = self.predictor.predict(&kernel.signature, Some(&kernel.base_duration));
            let modeled = &kernel.base_duration * &run.factor;
            let reference = hang_reference(&predicted, &modeled) * share;
            let at = &now + &self.cfg.hang_threshold * &reference;
            let run_id = run.run_id;
            self.rt(p).run.as_mut().expect("run").hang_reference = Some(reference);
            self.schedule(at, Event::HangCheck(p, run_id))?;
        }
        Ok(())
    }

    fn finish_kernel(&mut self, p: PctxId) -> Result<(), EngineError> {
        self.credit(p);
        let now = self.now();
        let run = self.rt(p).run.take().ok_or_else(|| internal("finish without a run"))?;
        let (v, kid) = (run.vctx, run.kernel);
        let (vi, ki) = (v.0 as usize, kid.0 as usize);
        if self.kstate[ki].retired != self.kstate[ki].target {
            return Err(EngineError::Internal(format!("{kid} finished with work outstanding")));
        }
        self.cluster.pctx_mut(p)?.hw_queue.retain(|k| *k != kid);
        let signature = self.report.executions[ki].executed.ok_or_else(|| internal("finish before start"))?;
        let busy = {
            let exec = &mut self.report.executions[ki];
            exec.finished = Some(now.clone());
            if let Some(tag) = &self.kernels[ki].reduction {
                exec.result = Some(kernel_reduction_result(tag, signature.grid_size));
            }
            exec.busy_time()
        };
        self.record(TranscriptKind::Finish, v, kid, p, signature)?;
        log_event!(self, "kernel-finish", "vctx" => v, "kernel" => kid, "pctx" => p, "busy" => &busy);
        let kernel = &self.kernels[ki];
        self.predictor.observe(kernel.signature, &busy);
        for r in &kernel.touched {
            let region = self.regions.get_mut(r).expect("known region");
            region.dirty = true;
            region.resident_on.clear();
            region.resident_on.insert(p);
        }
        match kernel.phase {
            Phase::Prefill => self.vrt[vi].prefill_done = Some(now.clone()),
            Phase::Decode => self.vrt[vi].decode_done.push(now.clone()),
            _ => {}
        }
        self.completions.push(CompletionInfo {
            vctx: v,
            kernel: kid,
            pctx: p,
            signature: kernel.signature,
            phase: kernel.phase,
            effective_duration: busy,
        });
        self.vctxs[vi].pending.pop_front();
        self.vctxs[vi].logical_progress += 1;
        self.reprice(self.device_index(p))?;

        let preempting = self.prt[&p].preempt;
        match self.head(v) {
            None => self.complete_vctx(v)?,
            Some(next) => {
                let gap = self.kernels[next.0 as usize].host_gap.clone();
                if gap.is_zero() {
                    self.make_ready(v, next);
                } else {
                    let gen = self.next_gen();
                    self.vrt[vi].state = VState::Gap;
                    self.vrt[vi].launch_gen = gen;
                    self.schedule(&now + gap, Event::LaunchReady(v, gen))?;
                }
            }
        }
        if let Some(idx) = preempting {
            self.report.preemptions[idx].boundary = Some(now);
            let cost = self.costs.preempt_cost(&self.report.preemptions[idx].segment_time);
            self.charge(OverheadKind::Preemption, v, p, Some(kid), cost.clone());
            self.start_drain(p, cost)?;
        }
        Ok(())
    }

    // ----- preemption ----------------------------------------------------

    fn start_preempt(&mut self, q: PctxId, emergency: bool) -> Result<(), EngineError> {
        let now = self.now();
        let v = self.cluster.table().vctx_on(q).ok_or_else(|| internal("preempt of an unbound context"))?;
        let device = self.cluster.pctx(q)?.device;
        self.cluster.pctx_mut(q)?.rck_flag = true;
        let mut rec = PreemptionRecord {
            pctx: q,
            device,
            vctx: v,
            kernel: None,
            signal: now.clone(),
            boundary: None,
            yielded: None,
            segment_time: Rational::zero(),
            max_factor: Rational::one(),
            base_segment: Rational::zero(),
            cost: Rational::zero(),
            emergency,
        };
        let idx = self.report.preemptions.len();
        log_event!(self, "preempt-signal", "pctx" => q, "vctx" => v, "emergency" => emergency);
        let running = self.prt[&q].run.as_ref().map(|r| (r.kernel, r.phase.clone(), r.factor.clone()));
        match running {
            Some((kid, phase, factor)) => {
                let ki = kid.0 as usize;
                let seg = segment_work(&self.kstate[ki].target, self.cfg.segments);
                rec.kernel = Some(kid);
                rec.segment_time = &seg * &factor;
                rec.max_factor = factor.clone();
                rec.base_segment = seg;
                self.report.preemptions.push(rec);
                self.rt(q).preempt = Some(idx);
                if matches!(phase, RunPhase::Setup { .. }) {
                    self.abort_setup(q)?;
                    return self.yield_before_start(q);
                }
                if phase == RunPhase::Compute {
                    self.credit(q);
                    let ks = &self.kstate[ki];
                    let b = next_boundary(&ks.retired, &ks.target, self.cfg.segments);
                    if b == ks.retired {
                        return self.pause_at_boundary(q);
                    }
                    // At the last boundary the kernel simply finishes first.
                    if b != ks.target {
                        let t = &now + (&b - &ks.retired) * &factor;
                        let gen = self.next_gen();
                        let run = self.rt(q).run.as_mut().expect("run");
                        run.boundary = Some(b);
                        run.gen = gen;
                        self.schedule(t, Event::PreemptBoundary(q, gen))?;
                    }
                }
                Ok(())
            }
            None => {
                rec.kernel = self.head(v);
                self.report.preemptions.push(rec);
                self.rt(q).preempt = Some(idx);
                if matches!(self.vrt[v.0 as usize].state, VState::Migrating { dst, .. } if dst == q) {
                    self.abort_migration(v);
                }
                self.complete_yield(q)
            }
        }
    }

    /// Cuts a kernel's setup short: copies and switches that had not
    /// finished are undone and their unspent time leaves the ledger.
    fn abort_setup(&mut self, q: PctxId) -> Result<(), EngineError> {
        let now = self.now();
        let run = self.prt[&q].run.as_ref().ok_or_else(|| internal("abort without a run"))?;
        let (v, since, steps) = (run.vctx, run.since.clone(), run.setup.clone());
        let mut at = since;
        let mut refund = Rational::zero();
        let mut emptied = Vec::new();
        for step in steps {
            let spent = rational::max(&Rational::zero(), &rational::min(&(&now - &at), &step.amount));
            at += &step.amount;
            if spent == step.amount {
                continue;
            }
            refund += &step.amount - &spent;
            if spent.is_zero() {
                emptied.push(step.ledger);
            } else {
                self.report.ledger[step.ledger].amount = spent;
            }
            match step.undo {
                Undo::Fault { region, was_dirty } => {
                    let r = self.regions.get_mut(&region).expect("known region");
                    r.resident_on.remove(&q);
                    r.dirty = was_dirty;
                }
                Undo::Switch { last_vctx, last_pctx } => {
                    self.rt(q).last_vctx = last_vctx;
                    self.vrt[v.0 as usize].last_pctx = last_pctx;
                }
            }
        }
        for i in emptied.into_iter().rev() {
            self.report.ledger.remove(i);
        }
        log_event!(self, "setup-abort", "vctx" => v, "pctx" => q, "refund" => &refund);
        // The background copy was parked until the setup's end.
        self.halt_lazy(v);
        self.resume_lazy(v, now)
    }

    /// Yields a context whose kernel has not started computing.
    fn yield_before_start(&mut self, p: PctxId) -> Result<(), EngineError> {
        let now = self.now();
        let run = self.rt(p).run.take().ok_or_else(|| internal("yield without a run"))?;
        let (v, kid) = (run.vctx, run.kernel);
        self.cluster.pctx_mut(p)?.hw_queue.retain(|k| *k != kid);
        self.vrt[v.0 as usize].state = VState::Yielding;
        let idx = self.prt[&p].preempt.ok_or_else(|| internal("yield without a signal"))?;
        self.report.preemptions[idx].boundary = Some(now);
        let cost = self.costs.preempt_cost(&self.report.preemptions[idx].segment_time);
        self.charge(OverheadKind::Preemption, v, p, Some(kid), cost.clone());
        self.start_drain(p, cost)
    }

    fn pause_at_boundary(&mut self, q: PctxId) -> Result<(), EngineError> {
        self.credit(q);
        let now = self.now();
        let run = self.rt(q).run.take().ok_or_else(|| internal("pause without a run"))?;
        let (v, kid) = (run.vctx, run.kernel);
        let ki = kid.0 as usize;
        if let Some(b) = &run.boundary {
            if *b != self.kstate[ki].retired {
                return Err(EngineError::Internal(format!("{kid} paused off its boundary")));
            }
        }
        self.cluster.pctx_mut(q)?.hw_queue.retain(|k| *k != kid);
        self.report.executions[ki].preemptions += 1;
        let signature = self.report.executions[ki].executed.ok_or_else(|| internal("pause before start"))?;
        self.record(TranscriptKind::Pause, v, kid, q, signature)?;
        self.vrt[v.0 as usize].state = VState::Yielding;
        let idx = self.prt[&q].preempt.ok_or_else(|| internal("pause without a signal"))?;
        self.report.preemptions[idx].boundary = Some(now);
        let cost = self.costs.preempt_cost(&self.report.preemptions[idx].segment_time);
        self.charge(OverheadKind::Preemption, v, q, Some(kid), cost.clone());
        log_event!(self, "kernel-pause", "vctx" => v, "kernel" => kid, "pctx" => q, "retired" => &self.kstate[ki].retired);
        self.reprice(self.device_index(q))?;
        self.start_drain(q, cost)
    }

    fn start_drain(&mut self, q: PctxId, cost: Rational) -> Result<(), EngineError> {
        let idx = self.prt[&q].preempt.ok_or_else(|| internal("drain without a signal"))?;
        self.report.preemptions[idx].cost = cost.clone();
        if cost.is_zero() {
            return self.complete_yield(q);
        }
        let gen = self.next_gen();
        self.rt(q).drain = Some(gen);
        let t = self.now() + cost;
        self.schedule(t, Event::YieldDone(q, gen))
    }

    fn complete_yield(&mut self, q: PctxId) -> Result<(), EngineError> {
        let now = self.now();
        let idx = self.rt(q).preempt.take().ok_or_else(|| internal("yield without a signal"))?;
        self.rt(q).drain = None;
        self.report.preemptions[idx].yielded = Some(now.clone());
        let emergency = self.report.preemptions[idx].emergency;
        let Some(v) = self.cluster.table().vctx_on(q) else { return Ok(()) };
        let tier = self.tier(q);
        self.release(v)?;
        log_event!(self, "yield", "pctx" => q, "vctx" => v);
        let vi = v.0 as usize;
        match self.vrt[vi].state {
            VState::Done => Ok(()),
            VState::Yielding if !emergency => {
                self.vrt[vi].state = VState::Ready;
                self.vrt[vi].ready_since = now;
                Ok(())
            }
            _ if emergency => self.emergency_migrate(v, &tier),
            _ => Ok(()),
        }
    }

    // ----- migration -----------------------------------------------------

    fn remap(&mut self, v: VctxId, dst: PctxId) -> Result<(), EngineError> {
        let vi = v.0 as usize;
        let src = self.cluster.table().pctx_of(v);
        if src.is_some() {
            self.release(v)?;
        }
        self.bind(v, dst)?;
        if !self.vrt[vi].executed_any {
            // Initial placement: nothing has been computed yet, so there is
            // no state to move.
            for r in &self.vctxs[vi].working_set {
                if let Some(region) = self.regions.get_mut(r) {
                    region.resident_on.insert(dst);
                }
            }
            return self.dispatch_kernel(v, dst);
        }
        let head = self.head(v).ok_or_else(|| internal("remap without a pending kernel"))?;
        let set = compute_migration_set(&self.vctxs[vi], Some(&self.kernels[head.0 as usize]), &self.regions, dst)?;
        let from = src.or(self.vrt[vi].last_pctx);
        self.start_migration(v, from, dst, set, false, true)
    }

    fn start_migration(
        &mut self,
        v: VctxId,
        src: Option<PctxId>,
        dst: PctxId,
        set: MigrationSet,
        emergency: bool,
        launch_ready: bool,
    ) -> Result<(), EngineError> {
        let now = self.now();
        let vi = v.0 as usize;
        self.cancel_lazy(v);
        let mut rec = plan_migration(&self.costs, v, src, dst, &set, now);
        rec.emergency = emergency;
        rec.progress_before = self.vctxs[vi].logical_progress;
        let head = self.head(v);
        let copy = self.costs.copy_time(&rational::int(set.eager_bytes as i64));
        self.charge(OverheadKind::Remap, v, dst, head, self.costs.remap_fixed.clone());
        self.charge(OverheadKind::EagerCopy, v, dst, head, copy);
        log_event!(
            self,
            "migration-start",
            "vctx" => v,
            "src" => src,
            "dst" => dst,
            "eager" => rec.eager.clone(),
            "lazy" => rec.lazy.clone(),
            "eager_bytes" => rec.eager_bytes,
            "lazy_bytes" => rec.lazy_bytes,
            "end" => &rec.end,
            "emergency" => emergency,
        );
        let end = rec.end.clone();
        let idx = self.report.migrations.len();
        self.report.migrations.push(rec);
        let gen = self.next_gen();
        let rt = &mut self.vrt[vi];
        rt.last_migration = Some(idx);
        rt.mig_gen = gen;
        rt.state = VState::Migrating { dst, record: idx, launch_ready };
        self.schedule(end, Event::MigrationDone(v, gen))
    }

    fn finish_migration(&mut self, v: VctxId) -> Result<(), EngineError> {
        let vi = v.0 as usize;
        let VState::Migrating { dst, record, launch_ready } = self.vrt[vi].state.clone() else {
            return Ok(());
        };
        let now = self.now();
        let progress = self.vctxs[vi].logical_progress;
        let (eager, lazy) = {
            let rec = &mut self.report.migrations[record];
            rec.progress_after = Some(progress);
            (rec.eager.clone(), rec.lazy.clone())
        };
        for r in &eager {
            let region = self.regions.get_mut(r).expect("known region");
            region.resident_on.insert(dst);
            region.dirty = false;
        }
        log_event!(self, "migration-done", "vctx" => v, "dst" => dst);
        if !lazy.is_empty() {
            let sizes: Vec<(RegionId, u64)> = lazy.iter().map(|r| (*r, self.regions[r].bytes)).collect();
            self.vrt[vi].lazy = Some(LazyState { plan: LazyPlan::new(record, dst, &sizes), gen: 0 });
            self.resume_lazy(v, now)?;
        }
        if launch_ready {
            self.vrt[vi].state = VState::Ready;
            self.dispatch_kernel(v, dst)
        } else {
            self.vrt[vi].state = VState::Gap;
            Ok(())
        }
    }

    fn abort_migration(&mut self, v: VctxId) {
        let vi = v.0 as usize;
        if let VState::Migrating { record, launch_ready, .. } = self.vrt[vi].state {
            let rec = &mut self.report.migrations[record];
            rec.aborted = true;
            rec.lazy_cancelled = rec.lazy.len() as u32;
            self.vrt[vi].mig_gen = 0;
            self.vrt[vi].state = if launch_ready { VState::Ready } else { VState::Gap };
            log_event!(self, "migration-abort", "vctx" => v);
        }
    }

    /// Stops the background channel and credits what it copied.
    fn halt_lazy(&mut self, v: VctxId) {
        let now = self.now();
        let bw = self.costs.copy_bandwidth.clone();
        let Some(lazy) = self.vrt[v.0 as usize].lazy.as_mut() else { return };
        lazy.gen = 0;
        let dst = lazy.plan.dst;
        let done = lazy.plan.halt(&now, &bw);
        for r in done {
            let region = self.regions.get_mut(&r).expect("known region");
            region.resident_on.insert(dst);
            region.dirty = false;
            log_event!(self, "lazy-copy", "vctx" => v, "region" => r, "dst" => dst);
        }
    }

    fn resume_lazy(&mut self, v: VctxId, at: Rational) -> Result<(), EngineError> {
        let bw = self.costs.copy_bandwidth.clone();
        let gen = self.next_gen();
        let vi = v.0 as usize;
        let Some(lazy) = self.vrt[vi].lazy.as_mut() else { return Ok(()) };
        match lazy.plan.start(at.clone(), &bw) {
            Some(t) => {
                lazy.gen = gen;
                self.schedule(t, Event::LazyCopy(v, gen))
            }
            None => {
                let record = lazy.plan.record;
                self.report.migrations[record].lazy_done = Some(at);
                self.vrt[vi].lazy = None;
                Ok(())
            }
        }
    }

    /// Drops the background copy of an earlier migration.
    fn cancel_lazy(&mut self, v: VctxId) {
        self.halt_lazy(v);
        let now = self.now();
        if let Some(lazy) = self.vrt[v.0 as usize].lazy.take() {
            let n = lazy.plan.pending().count() as u32;
            let rec = &mut self.report.migrations[lazy.plan.record];
            if n == 0 {
                rec.lazy_done.get_or_insert(now);
            } else {
                rec.lazy_cancelled += n;
            }
        }
    }

    fn emergency_migrate(&mut self, v: VctxId, tier: &QuotaTier) -> Result<(), EngineError> {
        let vi = v.0 as usize;
        let cap = if self.vrt[vi].quarantined { self.min_tier() } else { None };
        let mut free: Vec<(QuotaTier, PctxId)> = Vec::new();
        for (di, dev) in self.cluster.devices.iter().enumerate() {
            if !dev.standby || !self.usable_device(di) {
                continue;
            }
            for p in &dev.pool {
                let ok = p.bound.is_none()
                    && !self.prt[&p.id].resetting
                    && cap.as_ref().is_none_or(|c| &p.tier <= c)
                    && self.cluster.fits_budget(p.id, None)?;
                if ok {
                    free.push((p.tier.clone(), p.id));
                }
            }
        }
        free.sort();
        let pick = free.iter().find(|(t, _)| t >= tier).or_else(|| free.iter().rev().find(|(t, _)| t < tier));
        let launch_ready = match &self.vrt[vi].state {
            VState::Evacuee { launch_ready, .. } => *launch_ready,
            state => matches!(state, VState::Yielding | VState::Ready),
        };
        let Some(&(_, dst)) = pick else {
            // Standby contexts taken by others free up eventually.
            let standby = (0..self.cluster.devices.len())
                .any(|di| self.cluster.devices[di].standby && self.usable_device(di));
            if !standby {
                return self.strand(v);
            }
            if !matches!(self.vrt[vi].state, VState::Evacuee { .. }) {
                log_event!(self, "evacuation-wait", "vctx" => v);
            }
            self.vrt[vi].state = VState::Evacuee { tier: tier.clone(), launch_ready };
            return Ok(());
        };
        self.bind(v, dst)?;
        let set = full_copy_set(&self.vctxs[vi], &self.regions);
        let src = self.vrt[vi].last_pctx;
        self.start_migration(v, src, dst, set, true, launch_ready)
    }

    fn strand(&mut self, v: VctxId) -> Result<(), EngineError> {
        let vi = v.0 as usize;
        self.cancel_lazy(v);
        self.abandon_head(v)?;
        self.vctxs[vi].status = VctxStatus::Stranded;
        self.vrt[vi].state = VState::Done;
        log_event!(self, "stranded", "vctx" => v);
        Ok(())
    }

    /// Records that a kernel which began executing will never finish.
    fn abandon_head(&mut self, v: VctxId) -> Result<(), EngineError> {
        let Some(k) = self.head(v) else { return Ok(()) };
        let exec = &self.report.executions[k.0 as usize];
        if let (Some(sig), None) = (exec.executed, &exec.finished) {
            let p = self.vrt[v.0 as usize].last_pctx.or(exec.pctxs.last().copied());
            if let Some(p) = p {
                self.record(TranscriptKind::Abort, v, k, p, sig)?;
            }
        }
        Ok(())
    }

    // ----- faults --------------------------------------------------------

    fn apply_fault(&mut self, index: usize) -> Result<(), EngineError> {
        let spec = self.faults[index].clone();
        let outcome = self.report.faults.len();
        let effect = match (&spec.kind, spec.target) {
            (FaultKind::LocalException, FaultTarget::Pctx(p)) => self.local_exception(p)?,
            (FaultKind::GlobalException, FaultTarget::Device(d)) => self.global_exception(d.0 as usize)?,
            (FaultKind::SoftHang { stretch }, FaultTarget::Pctx(p)) => self.soft_hang(p, stretch, outcome)?,
            _ => FaultEffect::NoEffect,
        };
        log_event!(self, "fault", "index" => index, "fault" => spec.kind.name(), "target" => spec.target.to_string(), "effect" => format!("{effect:?}"));
        self.report.faults.push(FaultOutcome { index, time: self.now(), spec, effect });
        Ok(())
    }

    fn local_exception(&mut self, p: PctxId) -> Result<FaultEffect, EngineError> {
        let di = self.device_index(p);
        if !self.usable_device(di) || self.prt[&p].resetting {
            return Ok(FaultEffect::NoEffect);
        }
        let Some(v) = self.cluster.table().vctx_on(p) else { return Ok(FaultEffect::NoEffect) };
        let vi = v.0 as usize;
        let now = self.now();
        let computing = self.prt[&p].run.as_ref().is_some_and(|r| r.phase == RunPhase::Compute);
        self.credit(p);
        if let Some(run) = self.rt(p).run.take() {
            self.cluster.pctx_mut(p)?.hw_queue.retain(|k| *k != run.kernel);
        }
        if computing {
            self.reprice(di)?;
        }
        {
            let rt = self.rt(p);
            rt.preempt = None;
            rt.drain = None;
            rt.stretch = None;
        }
        if let VState::Migrating { record, .. } = self.vrt[vi].state {
            self.report.migrations[record].aborted = true;
            self.vrt[vi].mig_gen = 0;
        }
        self.cancel_lazy(v);
        self.abandon_head(v)?;
        self.vctxs[vi].status = VctxStatus::Failed;
        self.vrt[vi].state = VState::Done;
        log_event!(self, "vctx-failed", "vctx" => v, "pctx" => p);
        self.release(v)?;
        self.rt(p).resetting = true;
        let delay = self.cfg.reset_delay.clone();
        self.schedule(now + delay, Event::PctxReset(p))?;
        Ok(FaultEffect::Contained { vctx: v })
    }

    fn global_exception(&mut self, di: usize) -> Result<FaultEffect, EngineError> {
        if di >= self.drt.len() || self.drt[di].failed {
            return Ok(FaultEffect::NoEffect);
        }
        self.drt[di].failed = true;
        for (i, dev) in self.cluster.devices.iter().enumerate() {
            if dev.standby && i != di {
                self.drt[i].active = true;
            }
        }
        let pool: Vec<PctxId> = self.cluster.devices[di].pool.iter().map(|p| p.id).collect();
        let mut vctxs = Vec::new();
        for p in pool {
            let Some(v) = self.cluster.table().vctx_on(p) else { continue };
            vctxs.push(v);
            match self.prt[&p].preempt {
                Some(idx) => self.report.preemptions[idx].emergency = true,
                None => self.start_preempt(p, true)?,
            }
        }
        Ok(FaultEffect::Evacuating { vctxs })
    }

    fn soft_hang(&mut self, p: PctxId, stretch: &Rational, outcome: usize) -> Result<FaultEffect, EngineError> {
        let di = self.device_index(p);
        if self.drt[di].failed {
            return Ok(FaultEffect::NoEffect);
        }
        if let Some(run) = self.prt[&p].run.clone() {
            let ki = run.kernel.0 as usize;
            if !self.kstate[ki].stretched {
                self.credit(p);
                let ks = &mut self.kstate[ki];
                ks.target = &ks.target * stretch;
                ks.stretched = true;
                self.report.executions[ki].work_target = ks.target.clone();
                if run.phase == RunPhase::Compute {
                    self.reprice(di)?;
                }
                return Ok(FaultEffect::Stretched { kernel: Some(run.kernel) });
            }
        }
        self.rt(p).stretch = Some((stretch.clone(), outcome));
        Ok(FaultEffect::Stretched { kernel: None })
    }

    fn hang_check(&mut self, p: PctxId, run_id: u64) -> Result<(), EngineError> {
        let Some(run) = self.prt[&p].run.clone() else { return Ok(()) };
        if run.run_id != run_id || run.phase != RunPhase::Compute || self.vrt[run.vctx.0 as usize].quarantined {
            return Ok(());
        }
        let (Some(start), Some(reference)) = (run.compute_start, run.hang_reference) else { return Ok(()) };
        let now = self.now();
        let elapsed = &now - start;
        if !detect_soft_hang(&elapsed, &reference, &self.cfg.hang_threshold) {
            return Ok(());
        }
        log_event!(self, "hang", "vctx" => run.vctx, "kernel" => run.kernel, "pctx" => p, "elapsed" => &elapsed, "reference" => &reference);
        self.report.hangs.push(HangDetection { vctx: run.vctx, kernel: run.kernel, pctx: p, time: now, reference, elapsed });
        self.quarantine(run.vctx, p)
    }

    fn quarantine(&mut self, v: VctxId, p: PctxId) -> Result<(), EngineError> {
        let Some(min) = self.min_tier() else { return Ok(()) };
        self.vrt[v.0 as usize].quarantined = true;
        self.report.quarantines.push(QuarantineState { vctx: v, demoted_tier: min.clone(), flagged_at: self.now() });
        log_event!(self, "quarantine", "vctx" => v, "tier" => min.fraction());
        if self.tier(p) > min && self.prt[&p].preempt.is_none() {
            self.start_preempt(p, false)?;
        }
        Ok(())
    }

    // ----- scheduling round ----------------------------------------------

    fn round(&mut self) -> Result<(), EngineError> {
        let policy = self.policy;
        for done in core::mem::take(&mut self.completions) {
            let verdict = {
                let view = self.view(self.ready_launches());
                let r = policy.on_completion(&view, &done);
                judge(&view, Hook::Completion, None, r)
            };
            self.apply_hook(Hook::Completion, Some(done.vctx), verdict)?;
        }
        if self.tick_fired {
            let verdict = {
                let view = self.view(self.ready_launches());
                let r = policy.on_congestion(&view);
                judge(&view, Hook::Congestion, None, r)
            };
            self.apply_hook(Hook::Congestion, None, verdict)?;
        }
        self.place_evacuees()?;
        self.place_quarantined()?;
        let order: Vec<VctxId> = self.ready_launches().iter().map(|l| l.vctx).collect();
        for v in order {
            let ready = self.ready_launches();
            let Some(launch) = ready.iter().find(|l| l.vctx == v).cloned() else { continue };
            let verdict = {
                let view = self.view(ready);
                let r = policy.on_launch(&view, &launch);
                judge(&view, Hook::Launch, Some(&launch), r)
            };
            self.apply_launch(&launch, verdict)?;
        }
        Ok(())
    }

    fn reject(&mut self, hook: Hook, vctx: Option<VctxId>, error: PolicyError) {
        log_event!(self, "policy-error", "hook" => hook.name(), "vctx" => vctx, "error" => error.to_string());
        self.report.policy_errors.push(PolicyErrorRecord { time: self.now(), hook, vctx, error });
    }

    fn apply_hook(&mut self, hook: Hook, vctx: Option<VctxId>, verdict: Verdict) -> Result<(), EngineError> {
        match verdict {
            Verdict::Fatal(e) => Err(EngineError::PolicyConfig(e)),
            Verdict::Rejected(e) => {
                self.reject(hook, vctx, e);
                Ok(())
            }
            Verdict::Apply(PolicyDecision::Preempt(p)) => {
                log_event!(self, "decision", "hook" => hook.name(), "decision" => "preempt", "pctx" => p);
                self.start_preempt(p, false)
            }
            Verdict::Apply(_) => Ok(()),
        }
    }

    fn apply_launch(&mut self, launch: &LaunchInfo, verdict: Verdict) -> Result<(), EngineError> {
        let v = launch.vctx;
        let decision = match verdict {
            Verdict::Fatal(e) => return Err(EngineError::PolicyConfig(e)),
            Verdict::Rejected(e) => {
                self.reject(Hook::Launch, Some(v), e);
                self.report.deferrals += 1;
                return Ok(());
            }
            Verdict::Apply(d) => d,
        };
        match decision {
            PolicyDecision::Dispatch(DispatchOutcome::Direct) => {
                let p = launch.bound.ok_or_else(|| internal("direct dispatch of an unbound launch"))?;
                log_event!(self, "decision", "vctx" => v, "decision" => "direct", "pctx" => p);
                self.dispatch_kernel(v, p)
            }
            PolicyDecision::Dispatch(DispatchOutcome::Remap(p)) => {
                log_event!(self, "decision", "vctx" => v, "decision" => "remap", "pctx" => p);
                self.remap(v, p)
            }
            PolicyDecision::Preempt(p) => {
                log_event!(self, "decision", "vctx" => v, "decision" => "preempt", "pctx" => p);
                self.start_preempt(p, false)
            }
            PolicyDecision::Dispatch(DispatchOutcome::Defer(_)) | PolicyDecision::NoAction => {
                self.report.deferrals += 1;
                Ok(())
            }
        }
    }

    /// Contexts waiting to leave a failed device go first, in context order.
    fn place_evacuees(&mut self) -> Result<(), EngineError> {
        for vi in 0..self.vrt.len() {
            if let VState::Evacuee { tier, .. } = &self.vrt[vi].state {
                let tier = tier.clone();
                self.emergency_migrate(VctxId(vi as u32), &tier)?;
            }
        }
        Ok(())
    }

    /// Quarantined contexts are placed by the engine, never by the policy,
    /// and only on the smallest tier.
    fn place_quarantined(&mut self) -> Result<(), EngineError> {
        let Some(min) = self.min_tier() else { return Ok(()) };
        for vi in 0..self.vrt.len() {
            let rt = &self.vrt[vi];
            if !rt.quarantined || rt.state != VState::Ready || self.vctxs[vi].status != VctxStatus::Active {
                continue;
            }
            let v = VctxId(vi as u32);
            match self.cluster.table().pctx_of(v) {
                Some(p) => {
                    if self.prt[&p].preempt.is_none() && self.tier(p) <= min {
                        self.dispatch_kernel(v, p)?;
                    }
                }
                None => {
                    let mut target = None;
                    for (di, dev) in self.cluster.devices.iter().enumerate() {
                        if !self.usable_device(di) {
                            continue;
                        }
                        for p in &dev.pool {
                            if p.tier == min
                                && p.bound.is_none()
                                && !self.prt[&p.id].resetting
                                && self.cluster.fits_budget(p.id, None)?
                            {
                                target = Some(target.map_or(p.id, |t: PctxId| t.min(p.id)));
                            }
                        }
                    }
                    if let Some(p) = target {
                        self.remap(v, p)?;
                    }
                }
            }
        }
        Ok(())
    }

    // ----- policy view ---------------------------------------------------

    fn deadline(&self, v: VctxId, k: KernelId) -> Option<Rational> {
        let vi = v.0 as usize;
        let slo = self.vctxs[vi].slo.as_ref()?;
        let arrival = &self.vctxs[vi].arrival;
        let e2e = slo.e2e_deadline.as_ref().map(|d| arrival + d);
        let phase_deadline = match (self.kinds[vi], self.kernels[k.0 as usize].phase) {
            (JobKind::Inference { .. }, Phase::Prefill) => Some(arrival + &slo.ttft_deadline),
            (JobKind::Inference { .. }, Phase::Decode) => Some(match self.vrt[vi].decode_done.last() {
                None => arrival + &slo.ttft_deadline,
                Some(t) => t + &slo.tpot_deadline,
            }),
            _ => None,
        };
        match (phase_deadline, e2e) {
            (Some(a), Some(b)) => Some(rational::min(&a, &b)),
            (a, b) => a.or(b),
        }
    }

    fn launch_info(&self, v: VctxId) -> Option<LaunchInfo> {
        let vi = v.0 as usize;
        let k = self.head(v)?;
        let kernel = &self.kernels[k.0 as usize];
        let ks = &self.kstate[k.0 as usize];
        let vc = &self.vctxs[vi];
        Some(LaunchInfo {
            vctx: v,
            job: vc.job,
            kernel: k,
            signature: kernel.signature,
            phase: kernel.phase,
            priority: vc.priority,
            ready_since: self.vrt[vi].ready_since.clone(),
            base_duration: kernel.base_duration.clone(),
            remaining_work: &ks.target - &ks.retired,
            saturation: kernel.saturation.clone(),
            mem_bw_demand: kernel.mem_bw_demand.clone(),
            mem_bound_fraction: kernel.mem_bound_fraction.clone(),
            deadline: self.deadline(v, k),
            bound: self.cluster.table().pctx_of(v),
            order: 0,
        })
    }

    /// Launches the policy may decide on, in the policy's order.
    fn ready_launches(&self) -> Vec<LaunchInfo> {
        let mut out = Vec::new();
        for (vi, rt) in self.vrt.iter().enumerate() {
            if rt.state != VState::Ready || rt.quarantined || self.vctxs[vi].status != VctxStatus::Active {
                continue;
            }
            let v = VctxId(vi as u32);
            if let Some(p) = self.cluster.table().pctx_of(v) {
                if self.prt[&p].preempt.is_some() {
                    continue;
                }
            }
            out.extend(self.launch_info(v));
        }
        let policy = self.policy;
        out.sort_by(|a, b| policy.launch_order(a, b));
        for (i, l) in out.iter_mut().enumerate() {
            l.order = i;
        }
        out
    }

    fn running_view(&self, run: &Run) -> RunningView {
        let now = self.now();
        let ki = run.kernel.0 as usize;
        let kernel = &self.kernels[ki];
        let ks = &self.kstate[ki];
        let (remaining_time, in_setup) = match &run.phase {
            RunPhase::Setup { until } => (until - &now + (&ks.target - &ks.retired) * &run.factor, true),
            RunPhase::Compute => {
                let retired = &ks.retired + (&now - &run.since) / &run.factor;
                ((&ks.target - retired) * &run.factor, false)
            }
        };
        RunningView {
            kernel: run.kernel,
            vctx: run.vctx,
            signature: kernel.signature,
            phase: kernel.phase,
            priority: self.vctxs[run.vctx.0 as usize].priority,
            remaining_time,
            factor: run.factor.clone(),
            segment_time: segment_work(&ks.target, self.cfg.segments) * &run.factor,
            mem_bw_demand: kernel.mem_bw_demand.clone(),
            in_setup,
        }
    }

    fn view(&self, ready: Vec<LaunchInfo>) -> PolicyView<'_> {
        let mut pctxs = Vec::new();
        let mut device_demand = BTreeMap::new();
        let mut device_quota = BTreeMap::new();
        for (di, dev) in self.cluster.devices.iter().enumerate() {
            if !self.drt[di].active {
                continue;
            }
            let mut demand = Rational::zero();
            for p in &dev.pool {
                let rt = &self.prt[&p.id];
                let running = rt.run.as_ref().map(|r| self.running_view(r));
                if let Some(r) = rt.run.as_ref().filter(|r| r.phase == RunPhase::Compute) {
                    demand += &self.kernels[r.kernel.0 as usize].mem_bw_demand;
                }
                let queued = p
                    .hw_queue
                    .iter()
                    .filter(|k| running.as_ref().is_none_or(|r| r.kernel != **k))
                    .map(|k| {
                        let kernel = &self.kernels[k.0 as usize];
                        QueuedView {
                            kernel: *k,
                            signature: kernel.signature,
                            base_duration: kernel.base_duration.clone(),
                        }
                    })
                    .collect();
                pctxs.push(PctxView {
                    id: p.id,
                    device: dev.id,
                    tier: p.tier.clone(),
                    bound: p.bound,
                    bound_priority: p.bound.map(|v| self.vctxs[v.0 as usize].priority),
                    bound_since: rt.bound_since.clone(),
                    preempting: rt.preempt.is_some(),
                    healthy: !self.drt[di].failed && !rt.resetting,
                    running,
                    queued,
                });
            }
            device_demand.insert(dev.id, demand);
            device_quota.insert(dev.id, dev.bound_quota());
        }
        let vctxs = self
            .vctxs
            .iter()
            .enumerate()
            .map(|(vi, v)| {
                let head = v.pending.front().map(|k| {
                    let kernel = &self.kernels[k.0 as usize];
                    HeadView {
                        kernel: *k,
                        signature: kernel.signature,
                        phase: kernel.phase,
                        base_duration: kernel.base_duration.clone(),
                    }
                });
                let decoding = matches!(self.kinds[vi], JobKind::Inference { .. })
                    && v.status == VctxStatus::Active
                    && self.vrt[vi].prefill_done.is_some();
                VctxView {
                    id: v.id,
                    job: v.job,
                    priority: v.priority,
                    status: v.status,
                    bound: self.cluster.table().pctx_of(v.id),
                    head,
                    decoding,
                    quarantined: self.vrt[vi].quarantined,
                    slo: v.slo.clone(),
                    arrival: v.arrival.clone(),
                }
            })
            .collect();
        PolicyView {
            now: self.now(),
            segments: self.cfg.segments,
            costs: self.costs.clone(),
            pctxs,
            vctxs,
            ready,
            device_demand,
            device_quota,
            predictor: &self.predictor,
        }
    }
}

fn judge(
    view: &PolicyView<'_>,
    hook: Hook,
    launch: Option<&LaunchInfo>,
    result: Result<PolicyDecision, PolicyError>,
) -> Verdict {
    match result {
        Err(e @ PolicyError::Config(_)) => Verdict::Fatal(e),
        Err(e) => Verdict::Rejected(e),
        Ok(d) => {
            if let Err(e) = policy::validate(view, hook, launch, &d) {
                return Verdict::Rejected(e);
            }
            if let PolicyDecision::Preempt(p) = d {
                if view.pctx(p).is_some_and(|p| p.preempting) {
                    return Verdict::Rejected(PolicyError::IllegalDecision(format!("{p} is already yielding")));
                }
            }
            Verdict::Apply(d)
        }
    }
}
