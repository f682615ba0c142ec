//! Decode-first policy: protects time-per-output-token at the expense of
//! first-token latency.

use core::cmp::Ordering;

use super::slo_aware::{lower_priority, SloAware};
use super::{LaunchInfo, PctxView, Policy, PolicyDecision, PolicyError, PolicyView};
use crate::model::Phase;
use crate::rational::{self, Rational};
use crate::runtime::{DeferReason, DispatchOutcome};

#[derive(Debug, Clone, Copy, Default)]
pub struct TpotFirst;

/// Lower-priority work, or a prefill of the same class when a decode needs
/// the context.
fn decode_may_take(launch: &LaunchInfo, victim: &PctxView) -> bool {
    if lower_priority(launch, victim) {
        return true;
    }
    launch.phase == Phase::Decode
        && victim.bound_priority == Some(launch.priority)
        && victim.running.as_ref().is_some_and(|r| r.phase == Phase::Prefill)
}

impl TpotFirst {
    /// Whether admitting another prefill now would push some active decode
    /// past its per-token deadline: the decode-step estimate times the
    /// number of decodes (counting the newcomer) must fit the deadline.
    pub fn prefill_would_hurt_decode(view: &PolicyView<'_>) -> bool {
        let decoding: alloc::vec::Vec<_> = view.vctxs.iter().filter(|v| v.decoding).collect();
        if decoding.is_empty() {
            return false;
        }
        let step = decoding
            .iter()
            .filter_map(|v| v.head.as_ref().filter(|h| h.phase == Phase::Decode))
            .map(|h| view.predictor.predict(&h.signature, Some(&h.base_duration)))
            .fold(None::<Rational>, |acc, q| Some(acc.map_or(q.clone(), |a| rational::max(&a, &q))));
        let Some(step) = step else { return false };
        let load = step * rational::int(decoding.len() as i64 + 1);
        decoding
            .iter()
            .filter_map(|v| v.slo.as_ref())
            .any(|slo| load > slo.tpot_deadline)
    }
}

impl Policy for TpotFirst {
    fn name(&self) -> &str {
        "tpot-first"
    }

    fn on_launch(&self, view: &PolicyView<'_>, launch: &LaunchInfo) -> Result<PolicyDecision, PolicyError> {
        if launch.phase == Phase::Prefill {
            let decode_waiting = view.ready.iter().any(|o| o.phase == Phase::Decode);
            if decode_waiting || Self::prefill_would_hurt_decode(view) {
                return Ok(PolicyDecision::Dispatch(DispatchOutcome::Defer(DeferReason::Policy)));
            }
        }
        Ok(SloAware::decide(view, launch, decode_may_take))
    }

    fn launch_order(&self, a: &LaunchInfo, b: &LaunchInfo) -> Ordering {
        let decode_first = |l: &LaunchInfo| l.phase != Phase::Decode;
        a.priority
            .cmp(&b.priority)
            .then_with(|| decode_first(a).cmp(&decode_first(b)))
            .then_with(|| a.ready_since.cmp(&b.ready_since))
            .then_with(|| a.vctx.cmp(&b.vctx))
    }
}
