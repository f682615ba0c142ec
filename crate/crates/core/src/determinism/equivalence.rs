//! Behavioral equivalence between a shared run and the exclusive run of the
//! same workload.
//!
//! Two runs are equivalent when every context launched the same sequence of
//! (semantic id, grid size) records and every reduction kernel produced a
//! bit-identical result. Under the default policy this always holds, since
//! launch records are never rewritten; [`AtomizingRewriter`] shows what
//! happens when a scheduler shrinks grids to fit its quota.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use num_traits::{Signed, Zero};

use super::FloatValue;
use crate::engine::{Engine, EngineError, LaunchRewriter};
use crate::model::{Kernel, KernelId, QuotaTier, Signature, VctxId, VctxStatus};
use crate::policy::{Policy, SloAware};
use crate::rational::Rational;
use crate::report::SimulationReport;
use crate::scenario::Scenario;

/// Scales each launch's grid by the quota of the context it lands on, the
/// way kernel atomization fits work to a resource fragment. For negative
/// testing only.
#[derive(Debug, Clone, Copy, Default)]
pub struct AtomizingRewriter;

impl LaunchRewriter for AtomizingRewriter {
    fn rewrite(&self, kernel: &Kernel, tier: &QuotaTier) -> Signature {
        let scaled = (Rational::from_integer(kernel.signature.grid_size.into()) * tier.fraction()).floor();
        let grid = u32::try_from(scaled.to_integer()).unwrap_or(u32::MAX).max(1);
        Signature { grid_size: grid, ..kernel.signature }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultMismatch {
    pub kernel: KernelId,
    pub exclusive: FloatValue,
    pub shared: FloatValue,
    /// Absolute difference, if both values are finite.
    pub delta: Option<Rational>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EquivalenceReport {
    /// Contexts whose launch sequences differ.
    pub signature_mismatches: Vec<VctxId>,
    pub result_mismatches: Vec<ResultMismatch>,
    pub kernels_compared: usize,
    pub reductions_compared: usize,
}

impl EquivalenceReport {
    pub fn equivalent(&self) -> bool {
        self.signature_mismatches.is_empty() && self.result_mismatches.is_empty()
    }
}

/// Compares two reports of the same scenario. Contexts that did not finish
/// in one of the runs are compared on the launches both runs started.
pub fn compare_runs(exclusive: &SimulationReport, shared: &SimulationReport) -> EquivalenceReport {
    let mut out = EquivalenceReport::default();
    let finished: BTreeMap<VctxId, bool> = shared
        .vctxs
        .iter()
        .map(|v| (v.vctx, v.status == VctxStatus::Completed))
        .collect();
    for v in &exclusive.vctxs {
        let a = exclusive.executed_signatures(v.vctx);
        let b = shared.executed_signatures(v.vctx);
        let both_done = v.status == VctxStatus::Completed && finished.get(&v.vctx) == Some(&true);
        let same = if both_done { a == b } else { a.starts_with(&b) || b.starts_with(&a) };
        out.kernels_compared += a.len().min(b.len());
        if !same {
            out.signature_mismatches.push(v.vctx);
        }
    }
    let theirs = shared.reduction_results();
    for (kernel, a) in exclusive.reduction_results() {
        let Some(&b) = theirs.get(&kernel) else { continue };
        out.reductions_compared += 1;
        if a.format() != b.format() || a.bits() != b.bits() {
            let delta = match (a.to_rational(), b.to_rational()) {
                (Some(x), Some(y)) => Some((x - y).abs()),
                _ => None,
            };
            out.result_mismatches.push(ResultMismatch { kernel, exclusive: a, shared: b, delta });
        }
    }
    out
}

/// Runs `scenario` exclusively and under `policy`, both through the same
/// launch path (with `rewriter` if given), and compares them.
pub fn check_equivalence(
    scenario: &Scenario,
    policy: &dyn Policy,
    rewriter: Option<&dyn LaunchRewriter>,
) -> Result<EquivalenceReport, EngineError> {
    let run = |s: &Scenario| -> Result<SimulationReport, EngineError> {
        let engine = Engine::new(s, policy)?;
        match rewriter {
            Some(r) => engine.with_rewriter(r).run(),
            None => engine.run(),
        }
    };
    let exclusive = run(&scenario.exclusive())?;
    let shared = run(scenario)?;
    Ok(compare_runs(&exclusive, &shared))
}

/// True iff the default policy preserves every launch record and every
/// reduction result of `scenario`.
pub fn verify_immutable_equivalence(scenario: &Scenario) -> Result<bool, EngineError> {
    Ok(check_equivalence(scenario, &SloAware, None)?.equivalent())
}

impl ResultMismatch {
    pub fn is_divergent(&self) -> bool {
        self.delta.as_ref().is_none_or(|d| !d.is_zero())
    }
}
