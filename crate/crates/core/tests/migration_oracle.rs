//! The migration set against a brute-force search over every way of
//! splitting the working set into eager, lazy and skipped regions.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use detshare_core::model::{
    Kernel, KernelId, MemoryRegion, Phase, PctxId, PriorityClass, RegionId, Signature, VctxId, VctxStatus,
    VirtualContext,
};
use detshare_core::rational::int;
use detshare_core::runtime::compute_migration_set;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    /// (bytes, dirty, resident on destination, touched by next kernel)
    regions: Vec<(u64, bool, bool, bool)>,
}

fn cases() -> impl Strategy<Value = Case> {
    prop::collection::vec((1u64..1000, any::<bool>(), any::<bool>(), any::<bool>()), 0..7)
        .prop_map(|regions| Case { regions })
}

const DST: PctxId = PctxId(1);
const SRC: PctxId = PctxId(0);

fn build(case: &Case) -> (VirtualContext, Kernel, BTreeMap<RegionId, MemoryRegion>) {
    let mut regions = BTreeMap::new();
    let mut touched = BTreeSet::new();
    for (i, &(bytes, dirty, on_dst, t)) in case.regions.iter().enumerate() {
        let id = RegionId(i as u32);
        let mut resident_on: BTreeSet<PctxId> = [SRC].into_iter().collect();
        if on_dst {
            resident_on.insert(DST);
        }
        regions.insert(id, MemoryRegion { id, owner: VctxId(0), bytes, dirty, resident_on });
        if t {
            touched.insert(id);
        }
    }
    let vctx = VirtualContext {
        id: VctxId(0),
        job: 0,
        priority: PriorityClass::BestEffort,
        arrival: int(0),
        pending: VecDeque::new(),
        working_set: regions.keys().copied().collect(),
        logical_progress: 0,
        status: VctxStatus::Active,
        slo: None,
    };
    let kernel = Kernel {
        id: KernelId(0),
        vctx: VctxId(0),
        signature: Signature { semantic_id: 1, grid_size: 1 },
        base_duration: int(1),
        saturation: int(1),
        mem_bw_demand: int(0),
        mem_bound_fraction: int(0),
        touched,
        phase: Phase::Other,
        host_gap: int(0),
        reduction: None,
    };
    (vctx, kernel, regions)
}

/// Enumerates all 3^n assignments and keeps the feasible one that copies
/// the fewest bytes eagerly, then the fewest lazily.
fn brute_force(case: &Case) -> (BTreeSet<RegionId>, BTreeSet<RegionId>) {
    let n = case.regions.len();
    let mut best: Option<(u64, u64, BTreeSet<RegionId>, BTreeSet<RegionId>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let (mut eager, mut lazy) = (BTreeSet::new(), BTreeSet::new());
        let (mut eb, mut lb) = (0, 0);
        let mut feasible = true;
        for (i, &(bytes, dirty, on_dst, touched)) in case.regions.iter().enumerate() {
            let choice = c % 3;
            c /= 3;
            let id = RegionId(i as u32);
            match choice {
                1 => {
                    eager.insert(id);
                    eb += bytes;
                }
                2 => {
                    lazy.insert(id);
                    lb += bytes;
                }
                _ => {}
            }
            // The next kernel must find what it touches on the destination.
            if touched && !on_dst && choice != 1 {
                feasible = false;
            }
            // Newer state must eventually reach the destination.
            if dirty && !on_dst && choice == 0 {
                feasible = false;
            }
            // Lazy copies run behind the kernel, so they can't hold its inputs.
            if touched && choice == 2 {
                feasible = false;
            }
        }
        if feasible && best.as_ref().is_none_or(|b| (eb, lb) < (b.0, b.1)) {
            best = Some((eb, lb, eager, lazy));
        }
    }
    let (_, _, e, l) = best.expect("copying everything is always feasible");
    (e, l)
}

proptest! {
    #[test]
    fn matches_brute_force(case in cases()) {
        let (vctx, kernel, regions) = build(&case);
        let set = compute_migration_set(&vctx, Some(&kernel), &regions, DST).unwrap();
        let (eager, lazy) = brute_force(&case);
        prop_assert_eq!(&set.eager, &eager);
        prop_assert_eq!(&set.lazy, &lazy);
        let bytes = |s: &BTreeSet<RegionId>| s.iter().map(|r| regions[r].bytes).sum::<u64>();
        prop_assert_eq!(set.eager_bytes, bytes(&eager));
        prop_assert_eq!(set.lazy_bytes, bytes(&lazy));
    }
}
