//! A simulation together with its exclusive baseline.

use detshare_core::engine::{simulate, EngineError};
use detshare_core::metrics::{compute_metrics, MetricsReport};
use detshare_core::policy::{Policy, SloAware};
use detshare_core::report::SimulationReport;
use detshare_core::scenario::Scenario;

#[derive(Debug, Clone)]
pub struct PairedRun {
    pub shared: SimulationReport,
    /// Every context alone on a full device, always under the default
    /// policy (a static assignment would not fit the baseline's devices).
    pub exclusive: SimulationReport,
    pub metrics: MetricsReport,
}

/// Runs `scenario` under `policy` and its exclusive counterpart side by
/// side; each simulation stays single-threaded.
pub fn run_paired(scenario: &Scenario, policy: &(dyn Policy + Sync)) -> Result<PairedRun, EngineError> {
    let alone = scenario.exclusive();
    let (shared, exclusive) = std::thread::scope(|s| {
        let baseline = s.spawn(|| simulate(&alone, &SloAware));
        let shared = simulate(scenario, policy);
        (shared, baseline.join().expect("baseline simulation panicked"))
    });
    let (shared, exclusive) = (shared?, exclusive?);
    let metrics = compute_metrics(&shared, Some(&exclusive));
    Ok(PairedRun { shared, exclusive, metrics })
}
