#![allow(dead_code)]

use detshare_core::determinism::FloatFormat;
use detshare_core::model::{Phase, PriorityClass, ReductionTag, SloSpec};
use detshare_core::rational::{int, ratio, Rational};
use detshare_core::scenario::{DeviceSpec, JobKind, KernelSpec, Scenario, VctxSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LC: PriorityClass = PriorityClass::LatencyCritical;
pub const BE: PriorityClass = PriorityClass::BestEffort;

pub fn kernel(id: u64, base: Rational, saturation: Rational) -> KernelSpec {
    KernelSpec::simple(id, base, saturation)
}

pub fn job(id: u32, priority: PriorityClass, arrival: Rational, kernels: Vec<KernelSpec>) -> VctxSpec {
    VctxSpec { job: id, priority, arrival, slo: None, regions: vec![], kernels, kind: JobKind::Generic }
}

pub fn device(tiers: &[(i64, i64)]) -> DeviceSpec {
    DeviceSpec::new(tiers.iter().map(|&(n, d)| ratio(n, d)).collect())
}

pub fn scenario(devices: Vec<DeviceSpec>, vctxs: Vec<VctxSpec>) -> Scenario {
    Scenario { devices, vctxs, ..Scenario::default() }
}

/// Knobs for [`random_scenario`].
#[derive(Clone, Debug)]
pub struct Shape {
    pub jobs: (usize, usize),
    pub kernels: (usize, usize),
    pub tiers: Vec<(i64, i64)>,
    pub latency_critical: bool,
    pub reductions: bool,
    pub regions: bool,
    pub host_gaps: bool,
}

impl Default for Shape {
    fn default() -> Self {
        Shape {
            jobs: (2, 4),
            kernels: (1, 5),
            tiers: vec![(1, 4), (1, 4), (1, 2), (1, 1)],
            latency_critical: true,
            reductions: true,
            regions: true,
            host_gaps: true,
        }
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    &xs[rng.random_range(0..xs.len())]
}

/// A reproducible random multi-tenant scenario on one device.
pub fn random_scenario(seed: u64, shape: &Shape) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_jobs = rng.random_range(shape.jobs.0..=shape.jobs.1);
    let mut vctxs = Vec::with_capacity(n_jobs);
    for j in 0..n_jobs {
        let priority = if shape.latency_critical && rng.random_bool(0.4) { LC } else { BE };
        let n_regions = if shape.regions { rng.random_range(1..=3) } else { 0 };
        let regions: Vec<u64> = (0..n_regions).map(|_| rng.random_range(1..=64) * 250_000).collect();
        let n_kernels = rng.random_range(shape.kernels.0..=shape.kernels.1);
        let kernels = (0..n_kernels)
            .map(|i| {
                let mut k = kernel(
                    rng.random_range(1..=6),
                    ratio(rng.random_range(2..=16), 2),
                    pick(&mut rng, &[ratio(1, 4), ratio(1, 2), ratio(3, 4), int(1)]).clone(),
                );
                k.grid_size = *pick(&mut rng, &[8u32, 16, 32, 64, 128]);
                k.mem_bw_demand = pick(&mut rng, &[ratio(0, 1), ratio(1, 4), ratio(1, 2), ratio(3, 4)]).clone();
                k.mem_bound_fraction = pick(&mut rng, &[ratio(0, 1), ratio(1, 4), ratio(1, 2)]).clone();
                if n_regions > 0 {
                    k.touched = (0..n_regions).filter(|_| rng.random_bool(0.6)).collect();
                }
                if shape.host_gaps && i > 0 && rng.random_bool(0.5) {
                    k.host_gap = ratio(rng.random_range(1..=6), 2);
                }
                if shape.reductions && rng.random_bool(0.7) {
                    k.reduction = Some(ReductionTag { format: FloatFormat::Fp16, n: 256, seed: rng.random() });
                }
                k
            })
            .collect();
        let mut v = job(j as u32, priority, ratio(rng.random_range(0..=12), 2), kernels);
        v.regions = regions;
        if priority == LC {
            let deadline = ratio(rng.random_range(8..=40), 2);
            v.slo = Some(SloSpec::new(deadline.clone(), deadline.clone(), Some(deadline)).unwrap());
        }
        vctxs.push(v);
    }
    scenario(vec![device(&shape.tiers)], vctxs)
}

/// An inference request: one prefill and `decodes` decode kernels.
pub fn inference(id: u32, arrival: Rational, prefill: Rational, decodes: u32, slo: SloSpec) -> VctxSpec {
    let mut kernels = vec![KernelSpec { phase: Phase::Prefill, ..kernel(100, prefill, int(1)) }];
    for _ in 0..decodes {
        let mut k = kernel(101, int(1), ratio(3, 10));
        k.phase = Phase::Decode;
        kernels.push(k);
    }
    VctxSpec {
        job: id,
        priority: LC,
        arrival,
        slo: Some(slo),
        regions: vec![],
        kernels,
        kind: JobKind::Inference { prompt_tokens: 1, output_tokens: decodes },
    }
}
