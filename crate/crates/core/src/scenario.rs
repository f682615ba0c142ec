//! Declarative description of one simulation: devices, tenants, faults and
//! engine settings.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::{One, Zero};

use crate::fault::{FaultError, FaultSpec};
use crate::model::{
    Cluster, Device, DeviceId, Kernel, KernelId, MemoryRegion, ModelError, Phase, PriorityClass, ReductionTag, RegionId,
    Signature, SloSpec, VctxId, VctxStatus, VirtualContext,
};
use crate::rational::{self, Rational};
use crate::runtime::{CostParameters, RuntimeError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSpec {
    pub total_sm: u32,
    /// Bytes per time unit; informational, since kernel demands are shares.
    pub total_bandwidth: Rational,
    pub tiers: Vec<Rational>,
    /// Reserved for emergency migration; not offered to policies until a
    /// device-wide fault activates it.
    pub standby: bool,
}

impl DeviceSpec {
    pub fn new(tiers: Vec<Rational>) -> Self {
        DeviceSpec { total_sm: 108, total_bandwidth: rational::int(2_000_000_000), tiers, standby: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSpec {
    pub semantic_id: u64,
    pub grid_size: u32,
    pub base_duration: Rational,
    pub saturation: Rational,
    pub mem_bw_demand: Rational,
    pub mem_bound_fraction: Rational,
    /// Indices into the owning context's region list.
    pub touched: Vec<usize>,
    pub phase: Phase,
    pub host_gap: Rational,
    pub reduction: Option<ReductionTag>,
}

impl KernelSpec {
    /// A compute-only kernel with no memory footprint.
    pub fn simple(semantic_id: u64, base_duration: Rational, saturation: Rational) -> Self {
        KernelSpec {
            semantic_id,
            grid_size: 1,
            base_duration,
            saturation,
            mem_bw_demand: Rational::zero(),
            mem_bound_fraction: Rational::zero(),
            touched: vec![],
            phase: Phase::Other,
            host_gap: Rational::zero(),
            reduction: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobKind {
    Inference { prompt_tokens: u32, output_tokens: u32 },
    Training { iterations: u32 },
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VctxSpec {
    pub job: u32,
    pub priority: PriorityClass,
    pub arrival: Rational,
    pub slo: Option<SloSpec>,
    /// Region sizes in bytes.
    pub regions: Vec<u64>,
    pub kernels: Vec<KernelSpec>,
    pub kind: JobKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineConfig {
    /// Equal-work preemption segments per kernel.
    pub segments: u32,
    /// Abort after this many events.
    pub max_events: u64,
    /// Period of the congestion hook; falls back to the policy's preference.
    pub tick: Option<Rational>,
    pub record_log: bool,
    pub check_invariants: bool,
    pub hang_threshold: Rational,
    /// Time a physical context is unavailable after a local exception.
    pub reset_delay: Rational,
    pub predictor_alpha: Rational,
    /// Cold-start prediction when nothing else is known.
    pub predictor_default: Rational,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            segments: 16,
            max_events: 5_000_000,
            tick: None,
            record_log: false,
            check_invariants: true,
            hang_threshold: rational::int(3),
            reset_delay: rational::int(100),
            predictor_alpha: rational::ratio(3, 10),
            predictor_default: rational::int(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scenario {
    pub devices: Vec<DeviceSpec>,
    pub vctxs: Vec<VctxSpec>,
    pub faults: Vec<FaultSpec>,
    pub costs: CostParameters,
    pub engine: EngineConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("fault {index}: {source}")]
    Fault { index: usize, source: FaultError },
    #[error("kernel {index} of context {vctx}: {source}")]
    Kernel { vctx: usize, index: usize, source: ModelError },
    #[error("kernel {index} of context {vctx} touches region {region}, which does not exist")]
    UnknownRegion { vctx: usize, index: usize, region: usize },
    #[error("fault {index} targets something that does not exist")]
    UnknownFaultTarget { index: usize },
    #[error("{0}")]
    Config(&'static str),
}

/// Runtime objects instantiated from a scenario.
#[derive(Debug, Clone)]
pub struct Built {
    pub cluster: Cluster,
    pub kernels: Vec<Kernel>,
    pub vctxs: Vec<VirtualContext>,
    pub regions: BTreeMap<RegionId, MemoryRegion>,
    pub kinds: Vec<JobKind>,
}

impl Scenario {
    pub fn build(&self) -> Result<Built, ScenarioError> {
        self.costs.validate()?;
        if self.engine.segments == 0 {
            return Err(ScenarioError::Config("segments must be at least 1"));
        }
        if self.engine.hang_threshold <= Rational::one() {
            return Err(ScenarioError::Config("hang threshold must exceed 1"));
        }
        if self.engine.reset_delay < Rational::zero() {
            return Err(ScenarioError::Config("reset delay must be non-negative"));
        }
        if self.engine.tick.as_ref().is_some_and(|t| t <= &Rational::zero()) {
            return Err(ScenarioError::Config("tick must be positive"));
        }
        let mut devices = Vec::with_capacity(self.devices.len());
        let mut next_pctx = 0u32;
        for (i, d) in self.devices.iter().enumerate() {
            let mut dev = Device::create_pool(DeviceId(i as u32), d.total_sm, d.total_bandwidth.clone(), &d.tiers, next_pctx)?;
            dev.standby = d.standby;
            next_pctx += d.tiers.len() as u32;
            devices.push(dev);
        }
        let cluster = Cluster::new(devices)?;

        let mut kernels = Vec::new();
        let mut vctxs = Vec::with_capacity(self.vctxs.len());
        let mut regions = BTreeMap::new();
        let mut kinds = Vec::with_capacity(self.vctxs.len());
        let mut next_region = 0u32;
        for (vi, spec) in self.vctxs.iter().enumerate() {
            let vid = VctxId(vi as u32);
            if spec.arrival < Rational::zero() {
                return Err(ScenarioError::Config("arrival times must be non-negative"));
            }
            let region_ids: Vec<RegionId> = spec
                .regions
                .iter()
                .map(|&bytes| {
                    let id = RegionId(next_region);
                    next_region += 1;
                    if bytes == 0 {
                        return Err(ScenarioError::Config("regions must have a positive size"));
                    }
                    regions.insert(
                        id,
                        MemoryRegion { id, owner: vid, bytes, dirty: false, resident_on: BTreeSet::new() },
                    );
                    Ok(id)
                })
                .collect::<Result<_, _>>()?;
            let mut pending = VecDeque::with_capacity(spec.kernels.len());
            for (ki, k) in spec.kernels.iter().enumerate() {
                let touched = k
                    .touched
                    .iter()
                    .map(|&r| {
                        region_ids
                            .get(r)
                            .copied()
                            .ok_or(ScenarioError::UnknownRegion { vctx: vi, index: ki, region: r })
                    })
                    .collect::<Result<BTreeSet<_>, _>>()?;
                let kernel = Kernel {
                    id: KernelId(kernels.len() as u32),
                    vctx: vid,
                    signature: Signature { semantic_id: k.semantic_id, grid_size: k.grid_size },
                    base_duration: k.base_duration.clone(),
                    saturation: k.saturation.clone(),
                    mem_bw_demand: k.mem_bw_demand.clone(),
                    mem_bound_fraction: k.mem_bound_fraction.clone(),
                    touched,
                    phase: k.phase,
                    host_gap: k.host_gap.clone(),
                    reduction: k.reduction,
                };
                kernel.validate().map_err(|source| ScenarioError::Kernel { vctx: vi, index: ki, source })?;
                pending.push_back(kernel.id);
                kernels.push(kernel);
            }
            vctxs.push(VirtualContext {
                id: vid,
                job: spec.job,
                priority: spec.priority,
                arrival: spec.arrival.clone(),
                pending,
                working_set: region_ids.into_iter().collect(),
                logical_progress: 0,
                status: VctxStatus::Pending,
                slo: spec.slo.clone(),
            });
            kinds.push(spec.kind);
        }

        for (index, f) in self.faults.iter().enumerate() {
            f.validate().map_err(|source| ScenarioError::Fault { index, source })?;
            let exists = match f.target {
                crate::fault::FaultTarget::Pctx(p) => cluster.pctx(p).is_ok(),
                crate::fault::FaultTarget::Device(d) => (d.0 as usize) < cluster.devices.len(),
            };
            if !exists {
                return Err(ScenarioError::UnknownFaultTarget { index });
            }
        }
        Ok(Built { cluster, kernels, vctxs, regions, kinds })
    }

    /// The paired baseline: every context alone on a private full-quota
    /// device, with no faults.
    pub fn exclusive(&self) -> Scenario {
        let template = self.devices.iter().find(|d| !d.standby).cloned().unwrap_or_else(|| DeviceSpec::new(vec![]));
        Scenario {
            devices: self
                .vctxs
                .iter()
                .map(|_| DeviceSpec { tiers: vec![Rational::one()], standby: false, ..template.clone() })
                .collect(),
            vctxs: self.vctxs.clone(),
            faults: vec![],
            costs: self.costs.clone(),
            engine: EngineConfig { tick: None, record_log: false, ..self.engine.clone() },
        }
    }
}
