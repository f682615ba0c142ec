//! Fault scripts, soft-hang detection and quarantine records.

use alloc::vec::Vec;
use core::fmt;

use num_traits::One;

use crate::model::{DeviceId, KernelId, PctxId, QuotaTier, VctxId};
use crate::rational::{self, Rational};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultKind {
    /// Crash confined to one physical context.
    LocalException,
    /// Device-wide failure.
    GlobalException,
    /// The kernel on the target runs `stretch` times longer than it should.
    SoftHang { stretch: Rational },
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::LocalException => "local",
            FaultKind::GlobalException => "global",
            FaultKind::SoftHang { .. } => "soft-hang",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultTarget {
    Pctx(PctxId),
    Device(DeviceId),
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultTarget::Pctx(p) => p.fmt(f),
            FaultTarget::Device(d) => d.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: FaultTarget,
    pub time: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FaultError {
    #[error("{0} faults must target a physical context")]
    NeedsPctx(&'static str),
    #[error("global faults must target a device")]
    NeedsDevice,
    #[error("soft-hang stretch must exceed 1")]
    BadStretch,
    #[error("fault time must be non-negative")]
    NegativeTime,
}

impl FaultSpec {
    pub fn validate(&self) -> Result<(), FaultError> {
        if self.time < Rational::default() {
            return Err(FaultError::NegativeTime);
        }
        match (&self.kind, self.target) {
            (FaultKind::GlobalException, FaultTarget::Device(_)) => Ok(()),
            (FaultKind::GlobalException, _) => Err(FaultError::NeedsDevice),
            (FaultKind::SoftHang { stretch }, FaultTarget::Pctx(_)) => {
                if *stretch > Rational::one() {
                    Ok(())
                } else {
                    Err(FaultError::BadStretch)
                }
            }
            (k, FaultTarget::Device(_)) => Err(FaultError::NeedsPctx(k.name())),
            _ => Ok(()),
        }
    }
}

/// What a fault did when it fired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultEffect {
    /// Target was idle or already down.
    NoEffect,
    /// The bound context was terminated; the physical context is resetting.
    Contained { vctx: VctxId },
    /// Every tenant of the device was paused for evacuation.
    Evacuating { vctxs: Vec<VctxId> },
    /// A kernel (running now or the next one started) was stretched.
    Stretched { kernel: Option<KernelId> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultOutcome {
    pub index: usize,
    pub time: Rational,
    pub spec: FaultSpec,
    pub effect: FaultEffect,
}

/// True once a kernel has run for `threshold` times its predicted window.
pub fn detect_soft_hang(elapsed: &Rational, predicted: &Rational, threshold: &Rational) -> bool {
    elapsed >= &(threshold * predicted)
}

/// The prediction a hang is measured against: the learned duration, but
/// never less than what the speed model expects under current contention.
pub fn hang_reference(predicted: &Rational, modeled: &Rational) -> Rational {
    rational::max(predicted, modeled)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HangDetection {
    pub vctx: VctxId,
    pub kernel: KernelId,
    pub pctx: PctxId,
    pub time: Rational,
    pub reference: Rational,
    pub elapsed: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuarantineState {
    pub vctx: VctxId,
    pub demoted_tier: QuotaTier,
    pub flagged_at: Rational,
}
