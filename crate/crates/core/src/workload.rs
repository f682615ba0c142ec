//! Turning request records into kernel programs.
//!
//! An inference request becomes one prefill kernel whose length grows with
//! the prompt, followed by one decode kernel per output token. Prefill is
//! compute-heavy and light on bandwidth; decode is the opposite. A training
//! job repeats a fixed per-iteration kernel sequence.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::{One, Zero};

use crate::determinism::FloatFormat;
use crate::model::{Phase, PriorityClass, ReductionTag, SloSpec};
use crate::rational::{self, Rational};
use crate::scenario::{JobKind, KernelSpec, VctxSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Inference { prompt_tokens: u32, output_tokens: u32 },
    Training { iterations: u32 },
}

impl RequestKind {
    pub fn name(self) -> &'static str {
        match self {
            RequestKind::Inference { .. } => "inference",
            RequestKind::Training { .. } => "training",
        }
    }
}

/// One line of a request trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub arrival: Rational,
    pub job: u32,
    pub kind: RequestKind,
    pub slo: Option<SloSpec>,
    pub priority: PriorityClass,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkloadError {
    #[error("job {job}: arrival time is negative")]
    NegativeArrival { job: u32 },
    #[error("job {job}: inference needs at least one prompt and one output token")]
    EmptyInference { job: u32 },
    #[error("job {job}: training needs at least one iteration")]
    EmptyTraining { job: u32 },
    #[error("job {job}: no training profile is configured")]
    NoTrainingProfile { job: u32 },
    #[error("invalid profile: {0}")]
    Profile(&'static str),
}

impl RequestRecord {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let job = self.job;
        if self.arrival < Rational::zero() {
            return Err(WorkloadError::NegativeArrival { job });
        }
        match self.kind {
            RequestKind::Inference { prompt_tokens, output_tokens } if prompt_tokens == 0 || output_tokens == 0 => {
                Err(WorkloadError::EmptyInference { job })
            }
            RequestKind::Training { iterations: 0 } => Err(WorkloadError::EmptyTraining { job }),
            _ => Ok(()),
        }
    }
}

/// Shape of one kernel class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelShape {
    pub semantic_id: u64,
    pub grid_size: u32,
    pub saturation: Rational,
    pub mem_bw_demand: Rational,
    pub mem_bound_fraction: Rational,
    /// Host think time before each launch of this class.
    pub host_gap: Rational,
}

impl KernelShape {
    fn kernel(&self, duration: Rational, phase: Phase, touched: Vec<usize>) -> KernelSpec {
        KernelSpec {
            semantic_id: self.semantic_id,
            grid_size: self.grid_size,
            base_duration: duration,
            saturation: self.saturation.clone(),
            mem_bw_demand: self.mem_bw_demand.clone(),
            mem_bound_fraction: self.mem_bound_fraction.clone(),
            touched,
            phase,
            host_gap: self.host_gap.clone(),
            reduction: None,
        }
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        let zero = Rational::zero();
        let one = Rational::one();
        if self.grid_size == 0 {
            return Err(WorkloadError::Profile("grid_size must be at least 1"));
        }
        if self.saturation <= zero || self.saturation > one {
            return Err(WorkloadError::Profile("saturation must be in (0, 1]"));
        }
        if self.mem_bw_demand < zero || self.mem_bound_fraction < zero || self.mem_bound_fraction > one {
            return Err(WorkloadError::Profile("bandwidth shares must be in [0, 1]"));
        }
        if self.host_gap < zero {
            return Err(WorkloadError::Profile("host gap must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceProfile {
    pub prefill_per_token: Rational,
    pub decode_step: Rational,
    pub prefill: KernelShape,
    pub decode: KernelShape,
    pub weight_bytes: u64,
    /// KV-cache growth per token of prompt plus output.
    pub kv_bytes_per_token: u64,
    /// Tag decode kernels as reductions, so their numeric result can be
    /// compared across runs.
    pub reduction: Option<(FloatFormat, u32)>,
}

impl Default for InferenceProfile {
    /// A 512-token prefill costs about ten decode steps.
    fn default() -> Self {
        InferenceProfile {
            prefill_per_token: rational::ratio(5, 256),
            decode_step: rational::int(1),
            prefill: KernelShape {
                semantic_id: 100,
                grid_size: 128,
                saturation: rational::int(1),
                mem_bw_demand: rational::ratio(1, 5),
                mem_bound_fraction: rational::ratio(1, 10),
                host_gap: Rational::zero(),
            },
            decode: KernelShape {
                semantic_id: 101,
                grid_size: 32,
                saturation: rational::ratio(3, 10),
                mem_bw_demand: rational::ratio(3, 5),
                mem_bound_fraction: rational::ratio(4, 5),
                host_gap: rational::ratio(1, 20),
            },
            weight_bytes: 64_000_000,
            kv_bytes_per_token: 100_000,
            reduction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingProfile {
    /// Kernels of one iteration, as (shape, duration).
    pub iteration: Vec<(KernelShape, Rational)>,
    pub state_bytes: u64,
}

impl Default for TrainingProfile {
    fn default() -> Self {
        let step = |id, s: Rational, m: Rational, gap| KernelShape {
            semantic_id: id,
            grid_size: 256,
            saturation: s,
            mem_bw_demand: m.clone(),
            mem_bound_fraction: m,
            host_gap: gap,
        };
        TrainingProfile {
            iteration: vec![
                (step(200, rational::int(1), rational::ratio(1, 5), rational::ratio(1, 2)), rational::int(4)),
                (step(201, rational::int(1), rational::ratio(1, 5), Rational::zero()), rational::int(6)),
                (step(202, rational::ratio(1, 2), rational::ratio(1, 2), Rational::zero()), rational::int(2)),
            ],
            state_bytes: 200_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Profiles {
    pub inference: InferenceProfile,
    pub training: Option<TrainingProfile>,
}

impl Profiles {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let inf = &self.inference;
        if inf.prefill_per_token <= Rational::zero() || inf.decode_step <= Rational::zero() {
            return Err(WorkloadError::Profile("per-token costs must be positive"));
        }
        if inf.weight_bytes == 0 {
            return Err(WorkloadError::Profile("weight_bytes must be positive"));
        }
        inf.prefill.validate()?;
        inf.decode.validate()?;
        if let Some(t) = &self.training {
            if t.iteration.is_empty() || t.state_bytes == 0 {
                return Err(WorkloadError::Profile("training needs kernels and state"));
            }
            for (shape, d) in &t.iteration {
                shape.validate()?;
                if d <= &Rational::zero() {
                    return Err(WorkloadError::Profile("training kernel durations must be positive"));
                }
            }
        }
        Ok(())
    }

    /// The kernel program of one request. Reduction seeds are derived from
    /// `seed`, the job id and the kernel index, so the same inputs always
    /// yield the same program.
    pub fn expand(&self, record: &RequestRecord, seed: u64) -> Result<VctxSpec, WorkloadError> {
        record.validate()?;
        let (regions, kernels, kind) = match record.kind {
            RequestKind::Inference { prompt_tokens, output_tokens } => {
                let p = &self.inference;
                let kv = p.kv_bytes_per_token.max(1) * (prompt_tokens as u64 + output_tokens as u64);
                let mut kernels = Vec::with_capacity(1 + output_tokens as usize);
                let prefill_time = &p.prefill_per_token * rational::int(prompt_tokens as i64);
                kernels.push(p.prefill.kernel(prefill_time, Phase::Prefill, vec![0, 1]));
                kernels[0].host_gap = Rational::zero();
                for i in 0..output_tokens {
                    let mut k = p.decode.kernel(p.decode_step.clone(), Phase::Decode, vec![0, 1]);
                    if let Some((format, n)) = p.reduction {
                        k.reduction = Some(ReductionTag { format, n, seed: mix(seed, record.job, i) });
                    }
                    kernels.push(k);
                }
                (vec![p.weight_bytes, kv], kernels, JobKind::Inference { prompt_tokens, output_tokens })
            }
            RequestKind::Training { iterations } => {
                let t = self.training.as_ref().ok_or(WorkloadError::NoTrainingProfile { job: record.job })?;
                let mut kernels = Vec::with_capacity(iterations as usize * t.iteration.len());
                for _ in 0..iterations {
                    for (shape, d) in &t.iteration {
                        kernels.push(shape.kernel(d.clone(), Phase::Training, vec![0]));
                    }
                }
                kernels[0].host_gap = Rational::zero();
                (vec![t.state_bytes], kernels, JobKind::Training { iterations })
            }
        };
        Ok(VctxSpec {
            job: record.job,
            priority: record.priority,
            arrival: record.arrival.clone(),
            slo: record.slo.clone(),
            regions,
            kernels,
            kind,
        })
    }

    pub fn expand_all(&self, records: &[RequestRecord], seed: u64) -> Result<Vec<VctxSpec>, WorkloadError> {
        self.validate()?;
        records.iter().map(|r| self.expand(r, seed)).collect()
    }
}

/// SplitMix64 finaliser over the three inputs.
fn mix(seed: u64, job: u32, index: u32) -> u64 {
    let mut z = seed ^ ((job as u64) << 32 | index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
