//! Dispatch outcomes, preemption and migration costing.
//!
//! These are the pure pieces of the coroutine mechanism. The engine decides
//! *when* they happen; this module decides *what they cost*.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use num_traits::{One, Zero};

use crate::model::{DeviceId, Kernel, KernelId, MemoryRegion, PctxId, RegionId, VctxId, VirtualContext};
use crate::rational::{self, Rational};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuntimeError {
    #[error("{kernel} touches {region}, which is not in the working set of {vctx}")]
    TraceViolation { vctx: VctxId, kernel: KernelId, region: RegionId },
    #[error("invalid cost parameter: {0}")]
    InvalidCost(&'static str),
}

/// Why a launch was left pending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeferReason {
    /// The policy chose to wait.
    Policy,
    /// No physical context could take the launch.
    PoolExhausted,
    /// The policy's decision was rejected and replaced by a deferral.
    PolicyError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DispatchOutcome {
    /// Enqueue on the currently bound context.
    Direct,
    /// Rebind to the target before executing.
    Remap(PctxId),
    Defer(DeferReason),
}

/// Calibrated overheads. The two fractions are charged per affected kernel
/// segment, so they scale with the kernel's effective duration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostParameters {
    pub ctx_switch_overhead: Rational,
    pub preempt_overhead: Rational,
    /// Bytes per time unit.
    pub copy_bandwidth: Rational,
    pub remap_fixed: Rational,
    pub fault_fixed: Rational,
}

impl Default for CostParameters {
    fn default() -> Self {
        CostParameters {
            ctx_switch_overhead: rational::ratio(4, 100),
            preempt_overhead: rational::ratio(12, 100),
            // 16 GB/s with millisecond time units.
            copy_bandwidth: rational::int(16_000_000),
            remap_fixed: rational::ratio(5, 100),
            fault_fixed: rational::ratio(1, 100),
        }
    }
}

impl CostParameters {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let unit = |q: &Rational| q >= &Rational::zero() && q < &Rational::one();
        if !unit(&self.ctx_switch_overhead) {
            return Err(RuntimeError::InvalidCost("ctx_switch_overhead must be in [0, 1)"));
        }
        if !unit(&self.preempt_overhead) {
            return Err(RuntimeError::InvalidCost("preempt_overhead must be in [0, 1)"));
        }
        if self.copy_bandwidth <= Rational::zero() {
            return Err(RuntimeError::InvalidCost("copy_bandwidth must be positive"));
        }
        if self.remap_fixed < Rational::zero() || self.fault_fixed < Rational::zero() {
            return Err(RuntimeError::InvalidCost("fixed costs must be non-negative"));
        }
        Ok(())
    }

    pub fn copy_time(&self, bytes: &Rational) -> Rational {
        bytes / &self.copy_bandwidth
    }

    /// Cost of a context switch in front of a kernel whose effective
    /// duration would be `effective`.
    pub fn ctx_switch_cost(&self, effective: &Rational, segments: u32) -> Rational {
        &self.ctx_switch_overhead * effective / rational::int(segments as i64)
    }

    /// Cost of yielding a kernel whose segment lasts `segment_time`.
    pub fn preempt_cost(&self, segment_time: &Rational) -> Rational {
        &self.preempt_overhead * segment_time
    }

    pub fn demand_fault_cost(&self, remaining_bytes: &Rational) -> Rational {
        &self.fault_fixed + self.copy_time(remaining_bytes)
    }
}

/// Length of one preemption segment in work units.
pub fn segment_work(total_work: &Rational, segments: u32) -> Rational {
    total_work / rational::int(segments as i64)
}

/// First segment boundary at or after `retired`.
pub fn next_boundary(retired: &Rational, total_work: &Rational, segments: u32) -> Rational {
    let seg = segment_work(total_work, segments);
    let k = rational::ceil_div(retired, &seg);
    rational::min(&(Rational::from_integer(k) * seg), total_work)
}

/// Regions to copy before resuming (`eager`) and in the background (`lazy`).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MigrationSet {
    pub eager: BTreeSet<RegionId>,
    pub lazy: BTreeSet<RegionId>,
    pub eager_bytes: u64,
    pub lazy_bytes: u64,
}

impl MigrationSet {
    pub fn total_bytes(&self) -> u64 {
        self.eager_bytes + self.lazy_bytes
    }
}

/// Splits the working set of `vctx` for a move to `dst`.
///
/// Regions already resident on `dst` are never copied. Of the rest, those
/// the next kernel touches are copied eagerly and the remaining dirty ones
/// lazily. Clean, untouched regions stay where they are and are fetched on
/// demand if a later kernel needs them.
pub fn compute_migration_set(
    vctx: &VirtualContext,
    next: Option<&Kernel>,
    regions: &BTreeMap<RegionId, MemoryRegion>,
    dst: PctxId,
) -> Result<MigrationSet, RuntimeError> {
    if let Some(k) = next {
        if let Some(&region) = k.touched.iter().find(|r| !vctx.working_set.contains(r)) {
            return Err(RuntimeError::TraceViolation { vctx: vctx.id, kernel: k.id, region });
        }
    }
    let mut set = MigrationSet::default();
    for id in &vctx.working_set {
        let Some(r) = regions.get(id) else { continue };
        if r.resident_on.contains(&dst) {
            continue;
        }
        if next.is_some_and(|k| k.touched.contains(id)) {
            set.eager.insert(*id);
            set.eager_bytes += r.bytes;
        } else if r.dirty {
            set.lazy.insert(*id);
            set.lazy_bytes += r.bytes;
        }
    }
    Ok(set)
}

/// The full working set, copied eagerly. Used when the source is presumed
/// unreliable.
pub fn full_copy_set(vctx: &VirtualContext, regions: &BTreeMap<RegionId, MemoryRegion>) -> MigrationSet {
    let mut set = MigrationSet::default();
    for id in &vctx.working_set {
        if let Some(r) = regions.get(id) {
            set.eager.insert(*id);
            set.eager_bytes += r.bytes;
        }
    }
    set
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationRecord {
    pub vctx: VctxId,
    pub src: Option<PctxId>,
    pub dst: PctxId,
    pub eager: Vec<RegionId>,
    pub lazy: Vec<RegionId>,
    pub eager_bytes: u64,
    pub lazy_bytes: u64,
    pub start: Rational,
    /// Resume time on `dst`.
    pub end: Rational,
    pub lazy_done: Option<Rational>,
    pub demand_faults: u32,
    pub emergency: bool,
    pub aborted: bool,
    /// Lazy regions still in flight when a later migration superseded this one.
    pub lazy_cancelled: u32,
    /// Completed kernels of the context when the move began and ended.
    pub progress_before: u64,
    pub progress_after: Option<u64>,
}

/// Costs a move and returns its record; the copy starts at `start`.
pub fn plan_migration(
    costs: &CostParameters,
    vctx: VctxId,
    src: Option<PctxId>,
    dst: PctxId,
    set: &MigrationSet,
    start: Rational,
) -> MigrationRecord {
    let end = &start + &costs.remap_fixed + costs.copy_time(&rational::int(set.eager_bytes as i64));
    MigrationRecord {
        vctx,
        src,
        dst,
        eager: set.eager.iter().copied().collect(),
        lazy: set.lazy.iter().copied().collect(),
        eager_bytes: set.eager_bytes,
        lazy_bytes: set.lazy_bytes,
        start,
        end,
        lazy_done: None,
        demand_faults: 0,
        emergency: false,
        aborted: false,
        lazy_cancelled: 0,
        progress_before: 0,
        progress_after: None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreemptionRecord {
    pub pctx: PctxId,
    pub device: DeviceId,
    pub vctx: VctxId,
    pub kernel: Option<KernelId>,
    pub signal: Rational,
    /// When the kernel reached its segment boundary.
    pub boundary: Option<Rational>,
    /// When the context was handed back.
    pub yielded: Option<Rational>,
    /// Segment length in time at the moment of the signal.
    pub segment_time: Rational,
    /// Largest slowdown factor the kernel ran at between signal and boundary.
    pub max_factor: Rational,
    pub base_segment: Rational,
    pub cost: Rational,
    pub emergency: bool,
}

impl PreemptionRecord {
    pub fn wait(&self) -> Option<Rational> {
        self.yielded.as_ref().map(|y| y - &self.signal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OverheadKind {
    ContextSwitch,
    Preemption,
    Remap,
    EagerCopy,
    DemandFault,
}

impl OverheadKind {
    pub fn name(self) -> &'static str {
        match self {
            OverheadKind::ContextSwitch => "context-switch",
            OverheadKind::Preemption => "preemption",
            OverheadKind::Remap => "remap",
            OverheadKind::EagerCopy => "eager-copy",
            OverheadKind::DemandFault => "demand-fault",
        }
    }
}

/// One charged overhead. Every entry corresponds to time during which a
/// context was held without retiring work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub time: Rational,
    pub kind: OverheadKind,
    pub vctx: VctxId,
    pub pctx: PctxId,
    pub kernel: Option<KernelId>,
    pub amount: Rational,
}

pub fn ledger_total(entries: &[LedgerEntry], kind: Option<OverheadKind>) -> Rational {
    entries
        .iter()
        .filter(|e| kind.is_none_or(|k| e.kind == k))
        .fold(Rational::zero(), |acc, e| acc + &e.amount)
}

/// Background copy of lazily migrated regions, one region at a time in
/// region order, over a single channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LazyPlan {
    pub record: usize,
    pub dst: PctxId,
    queue: VecDeque<(RegionId, Rational)>,
    /// Set while the channel is copying.
    since: Option<Rational>,
}

impl LazyPlan {
    pub fn new(record: usize, dst: PctxId, regions: &[(RegionId, u64)]) -> Self {
        LazyPlan {
            record,
            dst,
            queue: regions.iter().map(|&(r, b)| (r, rational::int(b as i64))).collect(),
            since: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn is_running(&self) -> bool {
        self.since.is_some()
    }

    pub fn contains(&self, region: RegionId) -> bool {
        self.queue.iter().any(|(r, _)| *r == region)
    }

    pub fn pending(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.queue.iter().map(|(r, _)| *r)
    }

    /// Credits the bytes copied since the channel last started and returns
    /// the regions that completed. Stops the channel.
    pub fn halt(&mut self, now: &Rational, bandwidth: &Rational) -> Vec<RegionId> {
        let mut done = Vec::new();
        let Some(since) = self.since.take() else { return done };
        // A channel scheduled to restart later has copied nothing yet.
        if *now > since {
            let mut budget = (now - &since) * bandwidth;
            while let Some((r, rem)) = self.queue.front_mut() {
                if *rem <= budget {
                    budget -= &*rem;
                    done.push(*r);
                    self.queue.pop_front();
                } else {
                    *rem -= &budget;
                    break;
                }
            }
        }
        done
    }

    /// Starts the channel at `at` and returns when the head region lands.
    pub fn start(&mut self, at: Rational, bandwidth: &Rational) -> Option<Rational> {
        let head = self.queue.front()?;
        let t = &at + &head.1 / bandwidth;
        self.since = Some(at);
        Some(t)
    }

    /// Removes `region` for on-demand service and returns its untransferred
    /// bytes. The channel must be halted.
    pub fn take(&mut self, region: RegionId) -> Option<Rational> {
        debug_assert!(self.since.is_none());
        let idx = self.queue.iter().position(|(r, _)| *r == region)?;
        self.queue.remove(idx).map(|(_, b)| b)
    }
}
