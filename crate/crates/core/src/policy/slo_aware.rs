//! Default policy: place launches on the smallest tier that meets their
//! deadline, and reclaim capacity from lower-priority work when none does.

use alloc::vec::Vec;

use num_traits::Zero;

use super::{LaunchInfo, PctxView, Policy, PolicyDecision, PolicyError, PolicyView};
use crate::rational::Rational;
use crate::runtime::{DeferReason, DispatchOutcome};

#[derive(Debug, Clone, Copy, Default)]
pub struct SloAware;

/// Decides which bound contexts a launch may take by preemption.
pub type VictimRule = fn(&LaunchInfo, &PctxView) -> bool;

/// The victim's tenant is in a strictly lower priority class.
pub fn lower_priority(launch: &LaunchInfo, victim: &PctxView) -> bool {
    victim.bound_priority.is_some_and(|p| launch.priority.outranks(p))
}

const fn direct() -> PolicyDecision {
    PolicyDecision::Dispatch(DispatchOutcome::Direct)
}

const fn defer(reason: DeferReason) -> PolicyDecision {
    PolicyDecision::Dispatch(DispatchOutcome::Defer(reason))
}

fn remap(p: &PctxView) -> PolicyDecision {
    PolicyDecision::Dispatch(DispatchOutcome::Remap(p.id))
}

/// Lowest priority first, then the most remaining work, then lowest id.
fn victim_order(a: &&PctxView, b: &&PctxView) -> core::cmp::Ordering {
    let remaining = |p: &PctxView| p.running.as_ref().map(|r| r.remaining_time.clone()).unwrap_or_else(Rational::zero);
    b.bound_priority
        .cmp(&a.bound_priority)
        .then_with(|| remaining(b).cmp(&remaining(a)))
        .then_with(|| a.id.cmp(&b.id))
}

impl SloAware {
    /// The decision procedure, parameterised by who may be preempted.
    pub fn decide(view: &PolicyView<'_>, launch: &LaunchInfo, eligible: VictimRule) -> PolicyDecision {
        let meets = |p: &PctxView, wait: Rational| match &launch.deadline {
            None => true,
            Some(d) => &view.now + wait + view.estimate(launch, p) <= *d,
        };
        let victims = || -> Vec<&PctxView> {
            let mut v: Vec<_> = view
                .pctxs
                .iter()
                .filter(|p| p.bound.is_some() && p.healthy && !p.preempting && Some(p.id) != launch.bound)
                .filter(|p| eligible(launch, p))
                .collect();
            v.sort_by(victim_order);
            v
        };

        if let Some(own) = launch.bound.and_then(|b| view.pctx(b)) {
            let hol = super::predict_hol_blocking(view, own, view.predictor);
            if meets(own, hol) {
                return direct();
            }
            let mut higher: Vec<_> = view.candidates(launch).filter(|p| p.tier > own.tier).collect();
            higher.sort_by(|a, b| a.tier.cmp(&b.tier).then(a.id.cmp(&b.id)));
            if let Some(p) = higher.iter().find(|p| meets(p, Rational::zero())).or(higher.last()) {
                return remap(p);
            }
            if let Some(p) = victims().into_iter().find(|p| p.tier > own.tier) {
                return PolicyDecision::Preempt(p.id);
            }
            // Waiting would only add to the miss; run where we are.
            return direct();
        }

        let mut free: Vec<_> = view.candidates(launch).collect();
        free.sort_by(|a, b| a.tier.cmp(&b.tier).then(a.id.cmp(&b.id)));
        if launch.deadline.is_none() {
            if let Some(p) = free.first() {
                return remap(p);
            }
        } else if let Some(p) = free.iter().find(|p| meets(p, Rational::zero())) {
            return remap(p);
        }

        // A preemption already in flight will free a context for whichever
        // waiting launch is consulted first; don't start another for it.
        let in_flight = view
            .pctxs
            .iter()
            .filter(|p| p.preempting && eligible(launch, p))
            .count();
        let ahead = view
            .ready
            .iter()
            .filter(|o| o.order < launch.order && o.bound.is_none() && o.priority <= launch.priority)
            .count();
        if in_flight > ahead {
            return defer(DeferReason::Policy);
        }

        let candidates = victims();
        if let Some(p) = candidates.iter().find(|p| meets(p, view.yield_bound(p))) {
            return PolicyDecision::Preempt(p.id);
        }
        if let Some(p) = free.last() {
            return remap(p);
        }
        if let Some(p) = candidates.iter().max_by(|a, b| a.tier.cmp(&b.tier).then(b.id.cmp(&a.id))) {
            return PolicyDecision::Preempt(p.id);
        }
        defer(DeferReason::PoolExhausted)
    }
}

impl Policy for SloAware {
    fn name(&self) -> &str {
        "slo-aware"
    }

    fn on_launch(&self, view: &PolicyView<'_>, launch: &LaunchInfo) -> Result<PolicyDecision, PolicyError> {
        Ok(Self::decide(view, launch, lower_priority))
    }
}
