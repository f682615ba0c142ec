//! Fixed-slice baseline: every job owns one context for the whole run.

use alloc::collections::BTreeMap;
use alloc::format;

use super::{LaunchInfo, Policy, PolicyDecision, PolicyError, PolicyView};
use crate::model::PctxId;
use crate::runtime::{DeferReason, DispatchOutcome};

#[derive(Debug, Clone, Default)]
pub struct StaticPartition {
    /// Job id to its context.
    pub assignment: BTreeMap<u32, PctxId>,
}

impl StaticPartition {
    pub fn new(assignment: BTreeMap<u32, PctxId>) -> Self {
        StaticPartition { assignment }
    }
}

impl Policy for StaticPartition {
    fn name(&self) -> &str {
        "static"
    }

    fn on_launch(&self, view: &PolicyView<'_>, launch: &LaunchInfo) -> Result<PolicyDecision, PolicyError> {
        let target = *self
            .assignment
            .get(&launch.job)
            .ok_or_else(|| PolicyError::Config(format!("job {} has no assigned context", launch.job)))?;
        if launch.bound.is_some() {
            return Ok(PolicyDecision::Dispatch(DispatchOutcome::Direct));
        }
        match view.pctx(target) {
            Some(p) if p.is_free() && view.fits(p, None) => Ok(PolicyDecision::Dispatch(DispatchOutcome::Remap(target))),
            Some(_) => Ok(PolicyDecision::Dispatch(DispatchOutcome::Defer(DeferReason::Policy))),
            None => Err(PolicyError::Config(format!("assigned context {target} does not exist"))),
        }
    }
}
