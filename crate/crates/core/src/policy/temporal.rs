//! Time-slicing baseline: one tenant at a time owns the full device.

use num_traits::One;

use super::{LaunchInfo, Policy, PolicyDecision, PolicyError, PolicyView};
use crate::rational::Rational;
use crate::runtime::{DeferReason, DispatchOutcome};

#[derive(Debug, Clone)]
pub struct Temporal {
    pub quantum: Rational,
    /// How often ownership is re-examined; defaults to the quantum.
    pub tick: Option<Rational>,
}

impl Temporal {
    pub fn new(quantum: Rational) -> Self {
        Temporal { quantum, tick: None }
    }
}

impl Policy for Temporal {
    fn name(&self) -> &str {
        "temporal"
    }

    fn on_launch(&self, view: &PolicyView<'_>, launch: &LaunchInfo) -> Result<PolicyDecision, PolicyError> {
        if launch.bound.is_some() {
            return Ok(PolicyDecision::Dispatch(DispatchOutcome::Direct));
        }
        let mut full = view.pctxs.iter().filter(|p| p.tier.fraction().is_one()).peekable();
        if full.peek().is_none() {
            return Err(PolicyError::Config("temporal sharing needs a full-device context".into()));
        }
        // Only the first waiting launch in consultation order may take over.
        let first_waiting = view.ready.iter().filter(|o| o.bound.is_none()).map(|o| o.order).min();
        if first_waiting == Some(launch.order) {
            if let Some(p) = full.find(|p| p.is_free() && view.fits(p, None)) {
                return Ok(PolicyDecision::Dispatch(DispatchOutcome::Remap(p.id)));
            }
        }
        Ok(PolicyDecision::Dispatch(DispatchOutcome::Defer(DeferReason::Policy)))
    }

    fn on_congestion(&self, view: &PolicyView<'_>) -> Result<PolicyDecision, PolicyError> {
        if !view.ready.iter().any(|l| l.bound.is_none()) {
            return Ok(PolicyDecision::NoAction);
        }
        let expired = view.pctxs.iter().find(|p| {
            p.tier.fraction().is_one()
                && !p.preempting
                && p.bound_since.as_ref().is_some_and(|since| &view.now - since >= self.quantum)
        });
        Ok(match expired {
            Some(p) => PolicyDecision::Preempt(p.id),
            None => PolicyDecision::NoAction,
        })
    }

    fn tick_period(&self) -> Option<Rational> {
        Some(self.tick.clone().unwrap_or_else(|| self.quantum.clone()))
    }
}
