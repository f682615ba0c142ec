//! Synthetic arrival processes.
//!
//! Arrival times are drawn in double precision and then rounded to whole
//! microseconds (1e-6 time units), which keeps them exact in decimal text.

use detshare_core::rational::{self, to_f64};
use detshare_core::workload::RequestRecord;
use detshare_core::Rational;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::trace::RequestJson;

fn quantized(t: f64) -> Rational {
    rational::ratio((t * 1e6).round() as i64, 1_000_000)
}

/// Walks a piecewise-constant-rate Poisson process over `[0, duration)`.
/// `rate_at(t)` gives the rate in force at `t` and the end of that piece.
/// By memorylessness the next gap can be redrawn at every piece boundary.
fn arrivals(duration: f64, seed: u64, rate_at: impl Fn(f64) -> (f64, f64)) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = 0.0;
    while t < duration {
        let (rate, piece_end) = rate_at(t);
        let piece_end = piece_end.min(duration);
        if rate <= 0.0 {
            t = piece_end;
            continue;
        }
        let next = t + Exp::new(rate).expect("positive rate").sample(&mut rng);
        if next >= piece_end {
            t = piece_end;
        } else {
            out.push(next);
            t = next;
        }
    }
    out
}

fn records(times: Vec<f64>, template: &RequestJson, first_job: u32) -> Result<Vec<RequestRecord>, String> {
    let mut out: Vec<RequestRecord> = Vec::with_capacity(times.len());
    for (i, t) in times.into_iter().enumerate() {
        out.push(template.record(quantized(t), first_job + i as u32)?);
    }
    Ok(out)
}

/// Homogeneous Poisson arrivals at `rate` per time unit over `[0, duration)`.
pub fn gen_poisson(
    rate: &Rational,
    duration: &Rational,
    template: &RequestJson,
    seed: u64,
    first_job: u32,
) -> Result<Vec<RequestRecord>, String> {
    let rate = to_f64(rate);
    let times = arrivals(to_f64(duration), seed, |_| (rate, f64::INFINITY));
    records(times, template, first_job)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurstShape {
    pub base_rate: Rational,
    pub burst_rate: Rational,
    /// Each period opens with a burst of this length.
    pub burst_duration: Rational,
    pub period: Rational,
    pub duration: Rational,
}

/// Arrivals whose rate is `burst_rate` during the first `burst_duration` of
/// every `period` and `base_rate` for the rest of it.
pub fn gen_burst(
    shape: &BurstShape,
    template: &RequestJson,
    seed: u64,
    first_job: u32,
) -> Result<Vec<RequestRecord>, String> {
    if shape.period <= rational::zero() || shape.burst_duration > shape.period {
        return Err("burst period must be positive and at least the burst duration".into());
    }
    let (base, burst) = (to_f64(&shape.base_rate), to_f64(&shape.burst_rate));
    let (on, period) = (to_f64(&shape.burst_duration), to_f64(&shape.period));
    let times = arrivals(to_f64(&shape.duration), seed, |t| {
        let mut start = (t / period).floor() * period;
        // Division can land a boundary instant in the previous period.
        if start + period <= t {
            start += period;
        }
        if t < start + on {
            (burst, start + on)
        } else {
            (base, start + period)
        }
    });
    records(times, template, first_job)
}
