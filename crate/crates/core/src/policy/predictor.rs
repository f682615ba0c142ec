//! Per-signature duration predictor.

use alloc::collections::BTreeMap;

use num_traits::{One, Zero};

use crate::model::Signature;
use crate::rational::{self, Rational};

/// Fractional digits kept by the moving average. Without this the
/// denominators of an exact EWMA grow without bound.
const PRECISION_DIGITS: usize = 12;

/// Exponentially weighted moving average of observed effective durations,
/// keyed by launch signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationPredictor {
    alpha: Rational,
    default: Rational,
    table: BTreeMap<Signature, Rational>,
    /// Largest observation per semantic id, across grid sizes.
    worst: BTreeMap<u64, Rational>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("smoothing factor must be in (0, 1]")]
pub struct InvalidAlpha;

impl DurationPredictor {
    pub fn new(alpha: Rational, default: Rational) -> Result<Self, InvalidAlpha> {
        if alpha <= Rational::zero() || alpha > Rational::one() {
            return Err(InvalidAlpha);
        }
        Ok(DurationPredictor { alpha, default, table: BTreeMap::new(), worst: BTreeMap::new() })
    }

    pub fn alpha(&self) -> &Rational {
        &self.alpha
    }

    pub fn observe(&mut self, sig: Signature, duration: &Rational) {
        let next = match self.table.get(&sig) {
            None => duration.clone(),
            Some(prev) => {
                let blended = &self.alpha * duration + (Rational::one() - &self.alpha) * prev;
                rational::quantize(&blended, PRECISION_DIGITS)
            }
        };
        self.table.insert(sig, next);
        let worst = self.worst.entry(sig.semantic_id).or_insert_with(Rational::zero);
        if duration > worst {
            *worst = duration.clone();
        }
    }

    /// The moving average, if `sig` has been observed.
    pub fn observed(&self, sig: &Signature) -> Option<&Rational> {
        self.table.get(sig)
    }

    /// Prediction with the cold-start fallbacks: the worst observation of
    /// the same function at any grid size, then `hint`, then the default.
    pub fn predict(&self, sig: &Signature, hint: Option<&Rational>) -> Rational {
        if let Some(q) = self.table.get(sig) {
            return q.clone();
        }
        if let Some(q) = self.worst.get(&sig.semantic_id) {
            return q.clone();
        }
        hint.cloned().unwrap_or_else(|| self.default.clone())
    }
}
