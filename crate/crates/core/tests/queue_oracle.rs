use detshare_core::engine::EventQueue;
use detshare_core::rational::{ratio, Rational};
use proptest::prelude::*;

/// Interleaved schedule/pop operations: `Some((n, d))` schedules at
/// now + n/d, `None` pops.
fn ops() -> impl Strategy<Value = Vec<Option<(i64, i64)>>> {
    prop::collection::vec(prop::option::weighted(0.7, (0i64..20, 1i64..4)), 0..120)
}

proptest! {
    #[test]
    fn pops_match_a_stable_sort(times in prop::collection::vec((0i64..30, 1i64..5), 0..200)) {
        let mut q = EventQueue::new();
        let mut oracle: Vec<(Rational, usize)> = Vec::new();
        for (i, &(n, d)) in times.iter().enumerate() {
            q.schedule(ratio(n, d), i).unwrap();
            oracle.push((ratio(n, d), i));
        }
        oracle.sort_by(|a, b| a.0.cmp(&b.0));
        let mut popped = Vec::new();
        while let Some((t, _, i)) = q.pop() {
            popped.push((t, i));
        }
        prop_assert_eq!(popped, oracle);
    }

    #[test]
    fn interleaved_operations_match_a_list_model(ops in ops()) {
        let mut q = EventQueue::new();
        // Model: pending (time, insertion index), kept in insertion order.
        let mut model: Vec<(Rational, usize)> = Vec::new();
        let mut now = Rational::default();
        for (i, op) in ops.into_iter().enumerate() {
            match op {
                Some((n, d)) => {
                    let t = &now + ratio(n, d);
                    q.schedule(t.clone(), i).unwrap();
                    model.push((t, i));
                }
                None => {
                    let expected = model
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.0.cmp(&b.1.0).then(a.0.cmp(&b.0)))
                        .map(|(pos, _)| pos)
                        .map(|pos| model.remove(pos));
                    let got = q.pop().map(|(t, _, i)| (t, i));
                    prop_assert_eq!(&got, &expected);
                    if let Some((t, _)) = got {
                        prop_assert!(t >= now);
                        now = t;
                    }
                }
            }
            prop_assert_eq!(q.len(), model.len());
        }
    }
}

#[test]
fn scheduling_into_the_past_is_refused() {
    let mut q = EventQueue::new();
    q.schedule(ratio(2, 1), 'a').unwrap();
    q.pop();
    assert!(q.schedule(ratio(1, 1), 'b').is_err());
    assert!(q.schedule(ratio(2, 1), 'c').is_ok());
}
