//! Scenario configuration files.
//!
//! Every field is documented in the repository README. Rationals are
//! decimal strings (`"0.25"`), fractions (`"1/3"`) or plain JSON numbers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use detshare_core::determinism::FloatFormat;
use detshare_core::fault::{FaultKind, FaultSpec, FaultTarget};
use detshare_core::model::{DeviceId, PctxId};
use detshare_core::policy::{Policy, SloAware, StaticPartition, Temporal, TpotFirst};
use detshare_core::runtime::CostParameters;
use detshare_core::scenario::{DeviceSpec, EngineConfig, Scenario};
use detshare_core::workload::{InferenceProfile, KernelShape, Profiles, RequestKind, RequestRecord, TrainingProfile};
use detshare_core::{rational, Rational};
use serde::Deserialize;

use crate::decimal;
use crate::gen::{gen_burst, gen_poisson, BurstShape};
use crate::trace::{parse_trace, RequestJson, SloJson, TraceLine};

pub const POLICY_NAMES: [&str; 4] = ["slo-aware", "tpot-first", "temporal", "static"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("unknown policy {0:?}; valid policies: {names}", names = POLICY_NAMES.join(", "))]
    UnknownPolicy(String),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub devices: Vec<DeviceJson>,
    #[serde(default)]
    pub policy: PolicyField,
    #[serde(default)]
    pub cost_parameters: CostJson,
    #[serde(default)]
    pub engine: EngineJson,
    #[serde(default)]
    pub seed: u64,
    /// Applied to inference requests that carry no SLO of their own.
    #[serde(default)]
    pub slo: Option<SloJson>,
    #[serde(default)]
    pub workload: Vec<WorkloadSource>,
    #[serde(default)]
    pub profiles: ProfilesJson,
    #[serde(default)]
    pub faults: Vec<FaultJson>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceJson {
    #[serde(with = "decimal::list")]
    pub tiers: Vec<Rational>,
    #[serde(default)]
    pub standby: bool,
    #[serde(default)]
    pub total_sm: Option<u32>,
    #[serde(default, with = "decimal::option")]
    pub total_bandwidth: Option<Rational>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PolicyField {
    Name(String),
    Spec(PolicySpec),
}

impl Default for PolicyField {
    fn default() -> Self {
        PolicyField::Name(POLICY_NAMES[0].into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub name: String,
    /// Time slice of the temporal baseline.
    #[serde(default, with = "decimal::option")]
    pub quantum: Option<Rational>,
    /// Job id to physical context id, for the static policy.
    #[serde(default)]
    pub assignment: BTreeMap<u32, u32>,
}

impl PolicyField {
    pub fn spec(&self) -> PolicySpec {
        match self {
            PolicyField::Name(name) => PolicySpec { name: name.clone(), quantum: None, assignment: BTreeMap::new() },
            PolicyField::Spec(s) => s.clone(),
        }
    }
}

impl PolicySpec {
    pub fn build(&self) -> Result<Box<dyn Policy + Send + Sync>, ConfigError> {
        Ok(match self.name.as_str() {
            "slo-aware" | "default" => Box::new(SloAware),
            "tpot-first" => Box::new(TpotFirst),
            "temporal" => {
                let q = self.quantum.clone().unwrap_or_else(rational::one);
                if q <= rational::zero() {
                    return Err(invalid("temporal quantum must be positive"));
                }
                Box::new(Temporal::new(q))
            }
            "static" => {
                if self.assignment.is_empty() {
                    return Err(invalid("static policy needs an assignment of job ids to physical contexts"));
                }
                Box::new(StaticPartition::new(self.assignment.iter().map(|(&j, &p)| (j, PctxId(p))).collect()))
            }
            other => return Err(ConfigError::UnknownPolicy(other.into())),
        })
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostJson {
    #[serde(default, with = "decimal::option")]
    pub ctx_switch_overhead: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub preempt_overhead: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub copy_bandwidth: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub remap_fixed: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub fault_fixed: Option<Rational>,
}

fn set<T>(slot: &mut T, value: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = value {
        *slot = v.clone();
    }
}

impl CostJson {
    pub fn resolve(&self) -> CostParameters {
        let mut c = CostParameters::default();
        set(&mut c.ctx_switch_overhead, &self.ctx_switch_overhead);
        set(&mut c.preempt_overhead, &self.preempt_overhead);
        set(&mut c.copy_bandwidth, &self.copy_bandwidth);
        set(&mut c.remap_fixed, &self.remap_fixed);
        set(&mut c.fault_fixed, &self.fault_fixed);
        c
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineJson {
    #[serde(default)]
    pub segments: Option<u32>,
    #[serde(default)]
    pub max_events: Option<u64>,
    #[serde(default, with = "decimal::option")]
    pub tick: Option<Rational>,
    #[serde(default)]
    pub check_invariants: Option<bool>,
    #[serde(default, with = "decimal::option")]
    pub hang_threshold: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub reset_delay: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub predictor_alpha: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub predictor_default: Option<Rational>,
}

impl EngineJson {
    pub fn resolve(&self) -> EngineConfig {
        let mut e = EngineConfig::default();
        set(&mut e.segments, &self.segments);
        set(&mut e.max_events, &self.max_events);
        if self.tick.is_some() {
            e.tick = self.tick.clone();
        }
        set(&mut e.check_invariants, &self.check_invariants);
        set(&mut e.hang_threshold, &self.hang_threshold);
        set(&mut e.reset_delay, &self.reset_delay);
        set(&mut e.predictor_alpha, &self.predictor_alpha);
        set(&mut e.predictor_default, &self.predictor_default);
        e
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSource {
    /// JSON Lines trace file, relative to the config file.
    Trace(String),
    Requests(Vec<TraceLine>),
    Poisson(PoissonJson),
    Burst(BurstJson),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonJson {
    #[serde(with = "decimal")]
    pub rate: Rational,
    #[serde(with = "decimal")]
    pub duration: Rational,
    pub template: RequestJson,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstJson {
    #[serde(with = "decimal")]
    pub base_rate: Rational,
    #[serde(with = "decimal")]
    pub burst_rate: Rational,
    #[serde(with = "decimal")]
    pub burst_duration: Rational,
    #[serde(with = "decimal")]
    pub period: Rational,
    #[serde(with = "decimal")]
    pub duration: Rational,
    pub template: RequestJson,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeJson {
    #[serde(default)]
    pub semantic_id: Option<u64>,
    #[serde(default)]
    pub grid_size: Option<u32>,
    #[serde(default, with = "decimal::option")]
    pub saturation: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub mem_bw_demand: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub mem_bound_fraction: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub host_gap: Option<Rational>,
}

impl ShapeJson {
    fn over(&self, base: &KernelShape) -> KernelShape {
        let mut k = base.clone();
        set(&mut k.semantic_id, &self.semantic_id);
        set(&mut k.grid_size, &self.grid_size);
        set(&mut k.saturation, &self.saturation);
        set(&mut k.mem_bw_demand, &self.mem_bw_demand);
        set(&mut k.mem_bound_fraction, &self.mem_bound_fraction);
        set(&mut k.host_gap, &self.host_gap);
        k
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionJson {
    pub format: String,
    pub n: u32,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceJson {
    #[serde(default, with = "decimal::option")]
    pub prefill_per_token: Option<Rational>,
    #[serde(default, with = "decimal::option")]
    pub decode_step: Option<Rational>,
    #[serde(default)]
    pub prefill: ShapeJson,
    #[serde(default)]
    pub decode: ShapeJson,
    #[serde(default)]
    pub weight_bytes: Option<u64>,
    #[serde(default)]
    pub kv_bytes_per_token: Option<u64>,
    #[serde(default)]
    pub reduction: Option<ReductionJson>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationKernelJson {
    #[serde(with = "decimal")]
    pub duration: Rational,
    #[serde(flatten)]
    pub shape: ShapeJson,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingJson {
    #[serde(default)]
    pub iteration: Option<Vec<IterationKernelJson>>,
    #[serde(default)]
    pub state_bytes: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesJson {
    #[serde(default)]
    pub inference: InferenceJson,
    #[serde(default)]
    pub training: TrainingJson,
}

impl ProfilesJson {
    pub fn resolve(&self) -> Result<Profiles, ConfigError> {
        let i = &self.inference;
        let mut inf = InferenceProfile::default();
        set(&mut inf.prefill_per_token, &i.prefill_per_token);
        set(&mut inf.decode_step, &i.decode_step);
        inf.prefill = i.prefill.over(&inf.prefill);
        inf.decode = i.decode.over(&inf.decode);
        set(&mut inf.weight_bytes, &i.weight_bytes);
        set(&mut inf.kv_bytes_per_token, &i.kv_bytes_per_token);
        if let Some(r) = &i.reduction {
            let format: FloatFormat = r.format.parse().map_err(|e: detshare_core::determinism::format::UnknownFormat| invalid(e.to_string()))?;
            inf.reduction = Some((format, r.n));
        }
        let mut train = TrainingProfile::default();
        if let Some(kernels) = &self.training.iteration {
            train.iteration = kernels
                .iter()
                .enumerate()
                .map(|(n, k)| {
                    let base = KernelShape {
                        semantic_id: 200 + n as u64,
                        grid_size: 256,
                        saturation: rational::one(),
                        mem_bw_demand: rational::zero(),
                        mem_bound_fraction: rational::zero(),
                        host_gap: rational::zero(),
                    };
                    (k.shape.over(&base), k.duration.clone())
                })
                .collect();
        }
        set(&mut train.state_bytes, &self.training.state_bytes);
        let p = Profiles { inference: inf, training: Some(train) };
        p.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultJson {
    /// `local`, `global` or `soft-hang`.
    pub kind: String,
    #[serde(with = "decimal")]
    pub time: Rational,
    #[serde(default)]
    pub pctx: Option<u32>,
    #[serde(default)]
    pub device: Option<u32>,
    #[serde(default, with = "decimal::option")]
    pub stretch: Option<Rational>,
}

impl FaultJson {
    pub fn resolve(&self) -> Result<FaultSpec, ConfigError> {
        let target = match (self.pctx, self.device) {
            (Some(p), None) => FaultTarget::Pctx(PctxId(p)),
            (None, Some(d)) => FaultTarget::Device(DeviceId(d)),
            _ => return Err(invalid("a fault needs exactly one of pctx or device")),
        };
        let kind = match self.kind.as_str() {
            "local" => FaultKind::LocalException,
            "global" => FaultKind::GlobalException,
            "soft-hang" => FaultKind::SoftHang {
                stretch: self.stretch.clone().ok_or_else(|| invalid("soft-hang faults need a stretch"))?,
            },
            other => return Err(invalid(format!("unknown fault kind {other:?} (expected local, global or soft-hang)"))),
        };
        let spec = FaultSpec { kind, target, time: self.time.clone() };
        spec.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(spec)
    }
}

/// A config file together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: Config,
    pub path: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let file = File::open(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let config = serde_json::from_reader(BufReader::new(file))
            .map_err(|source| ConfigError::Json { path: path.into(), source })?;
        Ok(Loaded { config, path: path.into() })
    }

    fn dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// Every request of the workload, sorted by arrival.
    pub fn requests(&self, seed: u64) -> Result<Vec<RequestRecord>, ConfigError> {
        self.config.requests(self.dir(), seed)
    }

    pub fn scenario(&self, seed: u64) -> Result<Scenario, ConfigError> {
        self.config.scenario(self.dir(), seed)
    }
}

impl Config {
    pub fn requests(&self, dir: &Path, seed: u64) -> Result<Vec<RequestRecord>, ConfigError> {
        let mut all: Vec<RequestRecord> = Vec::new();
        for (i, source) in self.workload.iter().enumerate() {
            let next_job = all.iter().map(|r| r.job + 1).max().unwrap_or(0);
            // Each generator gets its own stream.
            let stream = seed.wrapping_add(i as u64);
            let batch = match source {
                WorkloadSource::Trace(file) => {
                    let path = dir.join(file);
                    let f = File::open(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                    parse_trace(BufReader::new(f)).map_err(|e| invalid(format!("{}: {e}", path.display())))?
                }
                WorkloadSource::Requests(lines) => lines
                    .iter()
                    .enumerate()
                    .map(|(n, l)| l.record().map_err(|e| invalid(format!("workload request {n}: {e}"))))
                    .collect::<Result<_, _>>()?,
                WorkloadSource::Poisson(p) => {
                    gen_poisson(&p.rate, &p.duration, &p.template, stream, next_job).map_err(invalid)?
                }
                WorkloadSource::Burst(b) => {
                    let shape = BurstShape {
                        base_rate: b.base_rate.clone(),
                        burst_rate: b.burst_rate.clone(),
                        burst_duration: b.burst_duration.clone(),
                        period: b.period.clone(),
                        duration: b.duration.clone(),
                    };
                    gen_burst(&shape, &b.template, stream, next_job).map_err(invalid)?
                }
            };
            all.extend(batch);
        }
        let mut seen = BTreeSet::new();
        for r in &all {
            if !seen.insert(r.job) {
                return Err(invalid(format!("job id {} appears twice in the workload", r.job)));
            }
        }
        let default_slo = self.slo.as_ref().map(SloJson::to_spec).transpose().map_err(invalid)?;
        for r in &mut all {
            if matches!(r.kind, RequestKind::Inference { .. }) && r.slo.is_none() {
                r.slo = Some(default_slo.clone().ok_or_else(|| {
                    invalid(format!("inference request {} has no SLO thresholds; set \"slo\" in the config or on the request", r.job))
                })?);
            }
        }
        all.sort_by(|a, b| a.arrival.cmp(&b.arrival));
        Ok(all)
    }

    pub fn scenario(&self, dir: &Path, seed: u64) -> Result<Scenario, ConfigError> {
        let devices = self
            .devices
            .iter()
            .map(|d| {
                let mut spec = DeviceSpec::new(d.tiers.clone());
                spec.standby = d.standby;
                set(&mut spec.total_sm, &d.total_sm);
                set(&mut spec.total_bandwidth, &d.total_bandwidth);
                spec
            })
            .collect();
        let requests = self.requests(dir, seed)?;
        let profiles = self.profiles.resolve()?;
        let vctxs = profiles.expand_all(&requests, seed).map_err(|e| invalid(e.to_string()))?;
        let faults = self.faults.iter().map(FaultJson::resolve).collect::<Result<_, _>>()?;
        let scenario = Scenario {
            devices,
            vctxs,
            faults,
            costs: self.cost_parameters.resolve(),
            engine: self.engine.resolve(),
        };
        scenario.build().map_err(|e| invalid(e.to_string()))?;
        Ok(scenario)
    }
}
