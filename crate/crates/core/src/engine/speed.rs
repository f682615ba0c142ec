//! Slowdown model: compute quota and shared memory bandwidth.
//!
//! A kernel whose compute saturates at `s` runs at full speed on any tier
//! of at least `s` and proportionally slower below it. Bandwidth is not
//! partitioned: when the demands of co-running kernels on a device add up to
//! more than the device provides, the bandwidth-bound share of every kernel
//! stretches by the oversubscription ratio.

use alloc::vec::Vec;

use num_traits::{One, Zero};

use crate::model::{Kernel, PctxId, QuotaTier};
use crate::rational::{self, Rational};

/// Running kernels of one device.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContentionSnapshot {
    pub entries: Vec<(PctxId, QuotaTier, Rational)>,
}

impl ContentionSnapshot {
    pub fn total_demand(&self) -> Rational {
        self.entries.iter().fold(Rational::zero(), |a, e| a + &e.2)
    }

    /// Demand of every entry except the one on `pctx`.
    pub fn demand_excluding(&self, pctx: PctxId) -> Rational {
        self.entries
            .iter()
            .filter(|e| e.0 != pctx)
            .fold(Rational::zero(), |a, e| a + &e.2)
    }
}

pub fn compute_factor(saturation: &Rational, tier: &QuotaTier) -> Rational {
    rational::max(&Rational::one(), &(saturation / tier.fraction()))
}

pub fn bandwidth_factor(mem_bound_fraction: &Rational, total_demand: &Rational) -> Rational {
    let over = rational::max(&Rational::one(), total_demand);
    (Rational::one() - mem_bound_fraction) + mem_bound_fraction * over
}

/// Slowdown (>= 1) of a kernel with the given characteristics when the
/// device's total bandwidth demand, its own included, is `total_demand`.
pub fn speed_factor(
    saturation: &Rational,
    mem_bound_fraction: &Rational,
    tier: &QuotaTier,
    total_demand: &Rational,
) -> Rational {
    compute_factor(saturation, tier) * bandwidth_factor(mem_bound_fraction, total_demand)
}

/// Slowdown of `kernel` on `pctx` given the device's running kernels. An
/// entry for `pctx` itself in the snapshot is ignored; the kernel's own
/// demand is always counted once.
pub fn kernel_speed(kernel: &Kernel, pctx: PctxId, tier: &QuotaTier, contention: &ContentionSnapshot) -> Rational {
    let total = contention.demand_excluding(pctx) + &kernel.mem_bw_demand;
    speed_factor(&kernel.saturation, &kernel.mem_bound_fraction, tier, &total)
}
