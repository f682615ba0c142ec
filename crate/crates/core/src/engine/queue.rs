//! Time-ordered event queue with FIFO tie-breaking.

use alloc::collections::BinaryHeap;
use core::cmp::Ordering;

use num_traits::Zero;

use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("event at {time} scheduled while the clock reads {now}")]
pub struct CausalityViolation {
    pub now: Rational,
    pub time: Rational,
}

#[derive(Debug)]
struct Entry<E> {
    time: Rational,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Events pop in `(time, seq)` order; `seq` is assigned at enqueue, so
/// simultaneous events keep their insertion order.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
    now: Rational,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_seq: 0, now: Rational::zero() }
    }

    /// The clock: the time of the last popped event.
    pub fn now(&self) -> &Rational {
        &self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: Rational, payload: E) -> Result<u64, CausalityViolation> {
        if time < self.now {
            return Err(CausalityViolation { now: self.now.clone(), time });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time, seq, payload });
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<&Rational> {
        self.heap.peek().map(|e| &e.time)
    }

    pub fn pop(&mut self) -> Option<(Rational, u64, E)> {
        let e = self.heap.pop()?;
        debug_assert!(e.time >= self.now);
        self.now = e.time.clone();
        Some((e.time, e.seq, e.payload))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::int;

    #[test]
    fn same_time_is_fifo() {
        let mut q = EventQueue::new();
        q.schedule(int(5), 'a').unwrap();
        q.schedule(int(5), 'b').unwrap();
        q.schedule(int(1), 'c').unwrap();
        let order: alloc::vec::Vec<char> = core::iter::from_fn(|| q.pop().map(|e| e.2)).collect();
        assert_eq!(order, ['c', 'a', 'b']);
    }

    #[test]
    fn past_events_are_rejected() {
        let mut q = EventQueue::new();
        q.schedule(int(4), ()).unwrap();
        q.pop();
        assert_eq!(q.schedule(int(3), ()), Err(CausalityViolation { now: int(4), time: int(3) }));
        assert!(q.schedule(int(4), ()).is_ok());
    }
}
