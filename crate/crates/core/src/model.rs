//! Domain types: contexts, kernels, memory regions, devices and bindings.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use num_traits::{One, Zero};

use crate::determinism::format::FloatFormat;
use crate::rational::{self, Rational};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// Virtual context handle.
    VctxId,
    "v"
);
id_type!(
    /// Physical context handle, unique across the cluster.
    PctxId,
    "p"
);
id_type!(KernelId, "k");
id_type!(RegionId, "r");
id_type!(DeviceId, "d");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("quota tier {0} is outside (0, 1]")]
    InvalidTier(String),
    #[error("tier list for a pool must not be empty")]
    EmptyPool,
    #[error("{pctx} is already bound to {holder}")]
    BindConflict { pctx: PctxId, holder: VctxId },
    #[error("{vctx} is already bound to {pctx}")]
    DoubleBind { vctx: VctxId, pctx: PctxId },
    #[error("binding {pctx} would push the bound quota on {device} above 1")]
    TierBudgetExceeded { pctx: PctxId, device: DeviceId },
    #[error("{0} is not bound")]
    NotBound(VctxId),
    #[error("unknown physical context {0}")]
    UnknownPctx(PctxId),
    #[error("duplicate physical context id {0}")]
    DuplicatePctx(PctxId),
    #[error("invalid kernel: {0}")]
    InvalidKernel(&'static str),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

/// Share of a device's SMs granted to one physical context.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuotaTier(Rational);

impl QuotaTier {
    pub fn new(fraction: Rational) -> Result<Self, ModelError> {
        if fraction <= Rational::zero() || fraction > Rational::one() {
            return Err(ModelError::InvalidTier(rational::render(&fraction, 6)));
        }
        Ok(QuotaTier(fraction))
    }

    pub fn full() -> Self {
        QuotaTier(Rational::one())
    }

    pub fn fraction(&self) -> &Rational {
        &self.0
    }
}

impl fmt::Display for QuotaTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&rational::render(&self.0, 6))
    }
}

/// Two service classes. `LatencyCritical` sorts first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PriorityClass {
    LatencyCritical,
    BestEffort,
}

impl PriorityClass {
    pub fn name(self) -> &'static str {
        match self {
            PriorityClass::LatencyCritical => "latency-critical",
            PriorityClass::BestEffort => "best-effort",
        }
    }

    /// True if `self` outranks `other`.
    pub fn outranks(self, other: PriorityClass) -> bool {
        self < other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Prefill,
    Decode,
    Training,
    Other,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
            Phase::Training => "training",
            Phase::Other => "other",
        }
    }
}

/// Launch identity: which function runs and over how large a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature {
    pub semantic_id: u64,
    pub grid_size: u32,
}

/// Marks a kernel as a reduction over `n` pseudo-random inputs. The chunking
/// is derived from the executed grid size, so the numeric result depends on
/// the launch record and nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReductionTag {
    pub format: FloatFormat,
    pub n: u32,
    pub seed: u64,
}

/// Latency objectives attached to an inference request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SloSpec {
    pub ttft_deadline: Rational,
    pub tpot_deadline: Rational,
    pub e2e_deadline: Option<Rational>,
}

impl SloSpec {
    pub fn new(ttft: Rational, tpot: Rational, e2e: Option<Rational>) -> Result<Self, ModelError> {
        let positive = |q: &Rational| q > &Rational::zero();
        if !positive(&ttft) || !positive(&tpot) || e2e.as_ref().is_some_and(|q| !positive(q)) {
            return Err(ModelError::InvariantViolation("SLO deadlines must be positive".into()));
        }
        Ok(SloSpec { ttft_deadline: ttft, tpot_deadline: tpot, e2e_deadline: e2e })
    }
}

/// Immutable launch record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Kernel {
    pub id: KernelId,
    pub vctx: VctxId,
    pub signature: Signature,
    /// Duration at full quota with no contention.
    pub base_duration: Rational,
    /// Smallest quota at which the kernel runs at full speed.
    pub saturation: Rational,
    /// Requested share of device memory bandwidth.
    pub mem_bw_demand: Rational,
    /// Share of the kernel's time that is bandwidth-bound.
    pub mem_bound_fraction: Rational,
    pub touched: BTreeSet<RegionId>,
    pub phase: Phase,
    /// Host-side think time between the previous kernel's completion and
    /// this launch.
    pub host_gap: Rational,
    pub reduction: Option<ReductionTag>,
}

impl Kernel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let zero = Rational::zero();
        let one = Rational::one();
        if self.base_duration <= zero {
            return Err(ModelError::InvalidKernel("base_duration must be positive"));
        }
        if self.signature.grid_size == 0 {
            return Err(ModelError::InvalidKernel("grid_size must be at least 1"));
        }
        if self.saturation <= zero || self.saturation > one {
            return Err(ModelError::InvalidKernel("compute saturation must be in (0, 1]"));
        }
        if self.mem_bw_demand < zero {
            return Err(ModelError::InvalidKernel("bandwidth demand must be non-negative"));
        }
        if self.mem_bound_fraction < zero || self.mem_bound_fraction > one {
            return Err(ModelError::InvalidKernel("memory-bound fraction must be in [0, 1]"));
        }
        if self.host_gap < zero {
            return Err(ModelError::InvalidKernel("host gap must be non-negative"));
        }
        Ok(())
    }

    /// FNV-1a digest of the fields that define what the kernel computes and
    /// how long it takes. Used to assert launch records are never rewritten.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(&self.signature.semantic_id.to_le_bytes());
        h.write(&self.signature.grid_size.to_le_bytes());
        for q in [&self.base_duration, &self.saturation, &self.mem_bound_fraction] {
            h.write(q.numer().to_signed_bytes_le().as_slice());
            h.write(b"/");
            h.write(q.denom().to_signed_bytes_le().as_slice());
        }
        for r in &self.touched {
            h.write(&r.0.to_le_bytes());
        }
        h.finish()
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRegion {
    pub id: RegionId,
    pub owner: VctxId,
    pub bytes: u64,
    /// Written since it was last replicated.
    pub dirty: bool,
    pub resident_on: BTreeSet<PctxId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VctxStatus {
    /// Not yet arrived.
    Pending,
    Active,
    Completed,
    Failed,
    Stranded,
}

impl VctxStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, VctxStatus::Completed | VctxStatus::Failed | VctxStatus::Stranded)
    }

    pub fn name(self) -> &'static str {
        match self {
            VctxStatus::Pending => "pending",
            VctxStatus::Active => "active",
            VctxStatus::Completed => "completed",
            VctxStatus::Failed => "failed",
            VctxStatus::Stranded => "stranded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualContext {
    pub id: VctxId,
    /// Jobs group the contexts of one tenant (e.g. all requests of one
    /// inference service).
    pub job: u32,
    pub priority: PriorityClass,
    pub arrival: Rational,
    /// Program order; never reordered.
    pub pending: VecDeque<KernelId>,
    pub working_set: BTreeSet<RegionId>,
    pub logical_progress: u64,
    pub status: VctxStatus,
    pub slo: Option<SloSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhysicalContext {
    pub id: PctxId,
    pub device: DeviceId,
    pub tier: QuotaTier,
    pub bound: Option<VctxId>,
    pub hw_queue: VecDeque<KernelId>,
    pub rck_flag: bool,
}

impl PhysicalContext {
    fn check(&self) -> Result<(), ModelError> {
        if self.bound.is_none() && (self.rck_flag || !self.hw_queue.is_empty()) {
            return Err(ModelError::InvariantViolation(format!(
                "{} is unbound but has a preemption flag or queued work",
                self.id
            )));
        }
        Ok(())
    }
}

/// Partial injective map from virtual to physical contexts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BindingTable {
    forward: BTreeMap<VctxId, PctxId>,
    reverse: BTreeMap<PctxId, VctxId>,
}

impl BindingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, vctx: VctxId, pctx: PctxId) -> Result<(), ModelError> {
        if let Some(&holder) = self.reverse.get(&pctx) {
            return Err(ModelError::BindConflict { pctx, holder });
        }
        if let Some(&existing) = self.forward.get(&vctx) {
            return Err(ModelError::DoubleBind { vctx, pctx: existing });
        }
        self.forward.insert(vctx, pctx);
        self.reverse.insert(pctx, vctx);
        Ok(())
    }

    pub fn unbind(&mut self, vctx: VctxId) -> Result<PctxId, ModelError> {
        let pctx = self.forward.remove(&vctx).ok_or(ModelError::NotBound(vctx))?;
        self.reverse.remove(&pctx);
        Ok(pctx)
    }

    pub fn pctx_of(&self, vctx: VctxId) -> Option<PctxId> {
        self.forward.get(&vctx).copied()
    }

    pub fn vctx_on(&self, pctx: PctxId) -> Option<VctxId> {
        self.reverse.get(&pctx).copied()
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VctxId, PctxId)> + '_ {
        self.forward.iter().map(|(&v, &p)| (v, p))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Device {
    pub id: DeviceId,
    pub total_sm: u32,
    pub total_bandwidth: Rational,
    pub pool: Vec<PhysicalContext>,
    /// Held back as a target for emergency migration.
    pub standby: bool,
}

impl Device {
    /// Builds a device whose pool holds one unbound context per requested
    /// tier. Context ids are assigned consecutively from `first_pctx`.
    pub fn create_pool(
        id: DeviceId,
        total_sm: u32,
        total_bandwidth: Rational,
        fractions: &[Rational],
        first_pctx: u32,
    ) -> Result<Device, ModelError> {
        if fractions.is_empty() {
            return Err(ModelError::EmptyPool);
        }
        let pool = fractions
            .iter()
            .enumerate()
            .map(|(i, f)| {
                Ok(PhysicalContext {
                    id: PctxId(first_pctx + i as u32),
                    device: id,
                    tier: QuotaTier::new(f.clone())?,
                    bound: None,
                    hw_queue: VecDeque::new(),
                    rck_flag: false,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Device { id, total_sm, total_bandwidth, pool, standby: false })
    }

    pub fn bound_quota(&self) -> Rational {
        self.pool
            .iter()
            .filter(|p| p.bound.is_some())
            .fold(Rational::zero(), |acc, p| acc + p.tier.fraction())
    }
}

/// All devices plus the binding table, kept mutually consistent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub devices: Vec<Device>,
    table: BindingTable,
    index: BTreeMap<PctxId, (usize, usize)>,
}

impl Cluster {
    pub fn new(devices: Vec<Device>) -> Result<Self, ModelError> {
        let mut index = BTreeMap::new();
        for (d, dev) in devices.iter().enumerate() {
            for (s, p) in dev.pool.iter().enumerate() {
                if index.insert(p.id, (d, s)).is_some() {
                    return Err(ModelError::DuplicatePctx(p.id));
                }
            }
        }
        Ok(Cluster { devices, table: BindingTable::new(), index })
    }

    pub fn table(&self) -> &BindingTable {
        &self.table
    }

    pub fn pctx(&self, id: PctxId) -> Result<&PhysicalContext, ModelError> {
        let &(d, s) = self.index.get(&id).ok_or(ModelError::UnknownPctx(id))?;
        Ok(&self.devices[d].pool[s])
    }

    pub fn pctx_mut(&mut self, id: PctxId) -> Result<&mut PhysicalContext, ModelError> {
        let &(d, s) = self.index.get(&id).ok_or(ModelError::UnknownPctx(id))?;
        Ok(&mut self.devices[d].pool[s])
    }

    pub fn device_of(&self, id: PctxId) -> Result<&Device, ModelError> {
        let &(d, _) = self.index.get(&id).ok_or(ModelError::UnknownPctx(id))?;
        Ok(&self.devices[d])
    }

    pub fn pctxs(&self) -> impl Iterator<Item = &PhysicalContext> + '_ {
        self.devices.iter().flat_map(|d| d.pool.iter())
    }

    /// Whether binding `pctx` keeps its device within the quota budget,
    /// optionally pretending `releasing` is unbound first.
    pub fn fits_budget(&self, pctx: PctxId, releasing: Option<PctxId>) -> Result<bool, ModelError> {
        let target = self.pctx(pctx)?;
        let dev = self.device_of(pctx)?;
        let mut used = dev.bound_quota();
        if let Some(r) = releasing {
            let rel = self.pctx(r)?;
            if rel.device == target.device && rel.bound.is_some() {
                used -= rel.tier.fraction();
            }
        }
        Ok(used + target.tier.fraction() <= Rational::one())
    }

    pub fn bind(&mut self, vctx: VctxId, pctx: PctxId) -> Result<(), ModelError> {
        let p = self.pctx(pctx)?;
        if let Some(holder) = p.bound {
            return Err(ModelError::BindConflict { pctx, holder });
        }
        if let Some(existing) = self.table.pctx_of(vctx) {
            return Err(ModelError::DoubleBind { vctx, pctx: existing });
        }
        if !self.fits_budget(pctx, None)? {
            return Err(ModelError::TierBudgetExceeded { pctx, device: p.device });
        }
        self.table.bind(vctx, pctx)?;
        self.pctx_mut(pctx)?.bound = Some(vctx);
        Ok(())
    }

    /// Releases the binding of `vctx`; the context's hardware queue is drained.
    pub fn unbind(&mut self, vctx: VctxId) -> Result<PctxId, ModelError> {
        let pctx = self.table.unbind(vctx)?;
        let p = self.pctx_mut(pctx)?;
        p.bound = None;
        p.hw_queue.clear();
        p.rck_flag = false;
        Ok(pctx)
    }

    pub fn check_invariants(&self) -> Result<(), ModelError> {
        for dev in &self.devices {
            if dev.bound_quota() > Rational::one() {
                return Err(ModelError::InvariantViolation(format!(
                    "bound quota on {} is {}",
                    dev.id,
                    rational::render(&dev.bound_quota(), 6)
                )));
            }
            for p in &dev.pool {
                p.check()?;
                if p.bound != self.table.vctx_on(p.id) {
                    return Err(ModelError::InvariantViolation(format!(
                        "{} disagrees with the binding table",
                        p.id
                    )));
                }
            }
        }
        for (v, p) in self.table.iter() {
            if self.pctx(p)?.bound != Some(v) {
                return Err(ModelError::InvariantViolation(format!("{v} -> {p} is not mirrored")));
            }
        }
        Ok(())
    }
}
