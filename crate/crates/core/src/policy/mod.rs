//! Scheduling hooks and the policies built on them.
//!
//! A policy sees an immutable [`PolicyView`] and answers with a
//! [`PolicyDecision`]. It never mutates simulator state; the engine validates
//! every decision and turns an illegal one into a logged deferral.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use num_traits::{One, Zero};

use crate::engine::speed::speed_factor;
use crate::model::{
    DeviceId, KernelId, Phase, PctxId, PriorityClass, QuotaTier, Signature, SloSpec, VctxId, VctxStatus,
};
use crate::rational::{self, Rational};
use crate::runtime::{CostParameters, DispatchOutcome};

pub mod explore;
pub mod predictor;
pub mod slo_aware;
pub mod static_partition;
pub mod temporal;
pub mod tpot_first;

pub use predictor::DurationPredictor;
pub use slo_aware::SloAware;
pub use static_partition::StaticPartition;
pub use temporal::Temporal;
pub use tpot_first::TpotFirst;

/// A kernel waiting at the head of its context's program order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchInfo {
    pub vctx: VctxId,
    pub job: u32,
    pub kernel: KernelId,
    pub signature: Signature,
    pub phase: Phase,
    pub priority: PriorityClass,
    pub ready_since: Rational,
    pub base_duration: Rational,
    /// Work still to retire (less than `base_duration` after a preemption).
    pub remaining_work: Rational,
    pub saturation: Rational,
    pub mem_bw_demand: Rational,
    pub mem_bound_fraction: Rational,
    /// Absolute time by which this launch should complete.
    pub deadline: Option<Rational>,
    pub bound: Option<PctxId>,
    /// Index in the engine's consultation order for this round.
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunningView {
    pub kernel: KernelId,
    pub vctx: VctxId,
    pub signature: Signature,
    pub phase: Phase,
    pub priority: PriorityClass,
    /// Time to completion at the current slowdown.
    pub remaining_time: Rational,
    pub factor: Rational,
    /// One preemption segment at the current slowdown.
    pub segment_time: Rational,
    pub mem_bw_demand: Rational,
    /// Still in its start-up overhead (context switch or demand faults).
    pub in_setup: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueuedView {
    pub kernel: KernelId,
    pub signature: Signature,
    pub base_duration: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PctxView {
    pub id: PctxId,
    pub device: DeviceId,
    pub tier: QuotaTier,
    pub bound: Option<VctxId>,
    pub bound_priority: Option<PriorityClass>,
    pub bound_since: Option<Rational>,
    /// A preemption signal is outstanding.
    pub preempting: bool,
    /// Usable: device healthy and online, context not resetting.
    pub healthy: bool,
    pub running: Option<RunningView>,
    pub queued: Vec<QueuedView>,
}

impl PctxView {
    pub fn is_free(&self) -> bool {
        self.bound.is_none() && self.healthy
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadView {
    pub kernel: KernelId,
    pub signature: Signature,
    pub phase: Phase,
    pub base_duration: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VctxView {
    pub id: VctxId,
    pub job: u32,
    pub priority: PriorityClass,
    pub status: VctxStatus,
    pub bound: Option<PctxId>,
    pub head: Option<HeadView>,
    /// Prefill done, decode not finished.
    pub decoding: bool,
    pub quarantined: bool,
    pub slo: Option<SloSpec>,
    pub arrival: Rational,
}

/// Read-only snapshot handed to every hook.
#[derive(Debug, Clone)]
pub struct PolicyView<'a> {
    pub now: Rational,
    pub segments: u32,
    pub costs: CostParameters,
    pub pctxs: Vec<PctxView>,
    pub vctxs: Vec<VctxView>,
    /// Launches awaiting a decision this round, in consultation order.
    pub ready: Vec<LaunchInfo>,
    /// Sum of bandwidth demand of the kernels computing on each device.
    pub device_demand: BTreeMap<DeviceId, Rational>,
    /// Sum of bound tiers on each device.
    pub device_quota: BTreeMap<DeviceId, Rational>,
    pub predictor: &'a DurationPredictor,
}

impl PolicyView<'_> {
    pub fn pctx(&self, id: PctxId) -> Option<&PctxView> {
        self.pctxs.iter().find(|p| p.id == id)
    }

    pub fn vctx(&self, id: VctxId) -> Option<&VctxView> {
        self.vctxs.iter().find(|v| v.id == id)
    }

    /// Whether `pctx` can be bound without exceeding its device's quota,
    /// counting `releasing` as already unbound.
    pub fn fits(&self, pctx: &PctxView, releasing: Option<PctxId>) -> bool {
        let mut used = self.device_quota.get(&pctx.device).cloned().unwrap_or_else(Rational::zero);
        if let Some(r) = releasing.and_then(|r| self.pctx(r)) {
            if r.device == pctx.device && r.bound.is_some() {
                used -= r.tier.fraction();
            }
        }
        used + pctx.tier.fraction() <= Rational::one()
    }

    /// Contexts `launch` could be remapped to right now.
    pub fn candidates<'s>(&'s self, launch: &'s LaunchInfo) -> impl Iterator<Item = &'s PctxView> + 's {
        self.pctxs
            .iter()
            .filter(move |p| p.is_free() && Some(p.id) != launch.bound && self.fits(p, launch.bound))
    }

    /// Predicted time for `launch` to finish its remaining work on `pctx`:
    /// the larger of the predictor's estimate and the speed model's.
    pub fn estimate(&self, launch: &LaunchInfo, pctx: &PctxView) -> Rational {
        let mut others = self.device_demand.get(&pctx.device).cloned().unwrap_or_else(Rational::zero);
        if let Some(r) = &pctx.running {
            if !r.in_setup {
                others -= &r.mem_bw_demand;
            }
        }
        let total = others + &launch.mem_bw_demand;
        let factor = speed_factor(&launch.saturation, &launch.mem_bound_fraction, &pctx.tier, &total);
        let analytic = &launch.remaining_work * factor;
        let share = &launch.remaining_work / &launch.base_duration;
        let learned = self.predictor.predict(&launch.signature, Some(&launch.base_duration)) * share;
        rational::max(&analytic, &learned)
    }

    /// Worst-case time until `pctx` is handed back after a preemption signal.
    pub fn yield_bound(&self, pctx: &PctxView) -> Rational {
        match &pctx.running {
            Some(r) => &r.segment_time + self.costs.preempt_cost(&r.segment_time),
            None => Rational::zero(),
        }
    }
}

/// Head-of-line blocking on `pctx`: the running kernel's remaining time
/// plus the predicted durations of everything queued behind it.
pub fn predict_hol_blocking(view: &PolicyView<'_>, pctx: &PctxView, predictor: &DurationPredictor) -> Rational {
    let mut total = pctx.running.as_ref().map(|r| r.remaining_time.clone()).unwrap_or_else(Rational::zero);
    for q in &pctx.queued {
        total += predictor.predict(&q.signature, Some(&q.base_duration));
    }
    let _ = view;
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyDecision {
    Dispatch(DispatchOutcome),
    Preempt(PctxId),
    NoAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hook {
    Launch,
    Completion,
    Congestion,
}

impl Hook {
    pub fn name(self) -> &'static str {
        match self {
            Hook::Launch => "on_launch",
            Hook::Completion => "on_completion",
            Hook::Congestion => "on_congestion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionInfo {
    pub vctx: VctxId,
    pub kernel: KernelId,
    pub pctx: PctxId,
    pub signature: Signature,
    pub phase: Phase,
    pub effective_duration: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("illegal decision: {0}")]
    IllegalDecision(String),
    #[error("preempt of unbound context {0}")]
    NoOpPreempt(PctxId),
    #[error("configuration error: {0}")]
    Config(String),
}

pub trait Policy {
    fn name(&self) -> &str;

    fn on_launch(&self, view: &PolicyView<'_>, launch: &LaunchInfo) -> Result<PolicyDecision, PolicyError>;

    fn on_completion(&self, view: &PolicyView<'_>, done: &CompletionInfo) -> Result<PolicyDecision, PolicyError> {
        let _ = (view, done);
        Ok(PolicyDecision::NoAction)
    }

    fn on_congestion(&self, view: &PolicyView<'_>) -> Result<PolicyDecision, PolicyError> {
        let _ = view;
        Ok(PolicyDecision::NoAction)
    }

    /// Order in which ready launches are offered to `on_launch`.
    fn launch_order(&self, a: &LaunchInfo, b: &LaunchInfo) -> Ordering {
        default_launch_order(a, b)
    }

    /// Period of the congestion hook, if the policy wants one.
    fn tick_period(&self) -> Option<Rational> {
        None
    }
}

/// Priority class, then longest-waiting, then context id.
pub fn default_launch_order(a: &LaunchInfo, b: &LaunchInfo) -> Ordering {
    a.priority
        .cmp(&b.priority)
        .then_with(|| a.ready_since.cmp(&b.ready_since))
        .then_with(|| a.vctx.cmp(&b.vctx))
}

/// Checks a decision against the framework's legality rules.
pub fn validate(
    view: &PolicyView<'_>,
    hook: Hook,
    launch: Option<&LaunchInfo>,
    decision: &PolicyDecision,
) -> Result<(), PolicyError> {
    match decision {
        PolicyDecision::NoAction | PolicyDecision::Dispatch(DispatchOutcome::Defer(_)) => Ok(()),
        PolicyDecision::Dispatch(outcome) => {
            let launch = match (hook, launch) {
                (Hook::Launch, Some(l)) => l,
                _ => {
                    return Err(PolicyError::IllegalDecision(format!("dispatch from {}", hook.name())));
                }
            };
            match outcome {
                DispatchOutcome::Direct => match launch.bound {
                    Some(_) => Ok(()),
                    None => Err(PolicyError::IllegalDecision(format!("direct dispatch of unbound {}", launch.vctx))),
                },
                DispatchOutcome::Remap(target) => {
                    let p = view
                        .pctx(*target)
                        .ok_or_else(|| PolicyError::IllegalDecision(format!("remap to unknown {target}")))?;
                    if Some(*target) == launch.bound {
                        return Err(PolicyError::IllegalDecision(format!("remap of {} onto itself", launch.vctx)));
                    }
                    if !p.is_free() {
                        return Err(PolicyError::IllegalDecision(format!("remap to unavailable {target}")));
                    }
                    if !view.fits(p, launch.bound) {
                        return Err(PolicyError::IllegalDecision(format!("remap to {target} exceeds the quota budget")));
                    }
                    Ok(())
                }
                DispatchOutcome::Defer(_) => Ok(()),
            }
        }
        PolicyDecision::Preempt(target) => {
            let p = view
                .pctx(*target)
                .ok_or_else(|| PolicyError::IllegalDecision(format!("preempt of unknown {target}")))?;
            if p.bound.is_none() {
                return Err(PolicyError::NoOpPreempt(*target));
            }
            if launch.is_some_and(|l| l.bound == Some(*target)) {
                return Err(PolicyError::IllegalDecision(format!("{} preempting its own context", target)));
            }
            Ok(())
        }
    }
}

/// All legal decisions for a hook invocation, in a fixed order: wait,
/// direct dispatch, remaps by context id, then preemptions by context id.
pub fn legal_decisions(view: &PolicyView<'_>, hook: Hook, launch: Option<&LaunchInfo>) -> Vec<PolicyDecision> {
    let mut out = Vec::new();
    match (hook, launch) {
        (Hook::Launch, Some(l)) => {
            out.push(PolicyDecision::Dispatch(DispatchOutcome::Defer(crate::runtime::DeferReason::Policy)));
            if l.bound.is_some() {
                out.push(PolicyDecision::Dispatch(DispatchOutcome::Direct));
            }
            for p in view.candidates(l) {
                out.push(PolicyDecision::Dispatch(DispatchOutcome::Remap(p.id)));
            }
        }
        _ => out.push(PolicyDecision::NoAction),
    }
    for p in &view.pctxs {
        if p.bound.is_some() && !p.preempting && launch.is_none_or(|l| l.bound != Some(p.id)) {
            out.push(PolicyDecision::Preempt(p.id));
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::rational::{int, ratio};
    use crate::runtime::DeferReason;
    use alloc::vec;

    #[test]
    fn hol_blocking_sums_running_and_queue() {
        let pred = predictor();
        let mut p = pctx(0, tier(1, 1));
        let v = view(&pred, vec![p.clone()], vec![]);
        assert_eq!(predict_hol_blocking(&v, &p, &pred), int(0));
        bind(&mut p, 1, PriorityClass::BestEffort);
        // 40% of an effective duration of 10 retired.
        p.running = Some(running(1, PriorityClass::BestEffort, int(6), int(1)));
        let queued_sig = Signature { semantic_id: 5, grid_size: 2 };
        p.queued.push(QueuedView { kernel: KernelId(9), signature: queued_sig, base_duration: int(5) });
        assert_eq!(predict_hol_blocking(&v, &p, &pred), int(11));
        let mut learned = DurationPredictor::new(ratio(1, 2), int(1)).unwrap();
        learned.observe(queued_sig, &int(8));
        learned.observe(queued_sig, &int(12));
        assert_eq!(predict_hol_blocking(&v, &p, &learned), int(16));
    }

    #[test]
    fn remap_to_bound_context_is_illegal() {
        let pred = predictor();
        let mut busy = pctx(1, tier(1, 2));
        bind(&mut busy, 7, PriorityClass::BestEffort);
        let v = view(&pred, vec![pctx(0, tier(1, 2)), busy], vec![]);
        let l = launch(0, PriorityClass::LatencyCritical, int(1));
        let bad = PolicyDecision::Dispatch(DispatchOutcome::Remap(PctxId(1)));
        assert!(matches!(validate(&v, Hook::Launch, Some(&l), &bad), Err(PolicyError::IllegalDecision(_))));
        let ok = PolicyDecision::Dispatch(DispatchOutcome::Remap(PctxId(0)));
        validate(&v, Hook::Launch, Some(&l), &ok).unwrap();
        let direct = PolicyDecision::Dispatch(DispatchOutcome::Direct);
        assert!(validate(&v, Hook::Launch, Some(&l), &direct).is_err());
        assert_eq!(
            validate(&v, Hook::Congestion, None, &PolicyDecision::Preempt(PctxId(0))),
            Err(PolicyError::NoOpPreempt(PctxId(0)))
        );
        assert!(validate(&v, Hook::Congestion, None, &direct).is_err());
    }

    #[test]
    fn legal_decisions_enumeration() {
        let pred = predictor();
        let mut held = pctx(1, tier(1, 2));
        bind(&mut held, 3, PriorityClass::BestEffort);
        let v = view(&pred, vec![pctx(0, tier(1, 2)), held, pctx(2, tier(1, 1))], vec![]);
        let l = launch(0, PriorityClass::BestEffort, int(1));
        let all = legal_decisions(&v, Hook::Launch, Some(&l));
        assert_eq!(
            all,
            vec![
                PolicyDecision::Dispatch(DispatchOutcome::Defer(DeferReason::Policy)),
                PolicyDecision::Dispatch(DispatchOutcome::Remap(PctxId(0))),
                PolicyDecision::Preempt(PctxId(1)),
            ]
        );
        for d in &all {
            validate(&v, Hook::Launch, Some(&l), d).unwrap();
        }
    }
}
