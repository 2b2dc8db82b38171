//! Discrete-event queue over virtual milliseconds.

use std::collections::BTreeMap;

use crate::time::{Clock, Timestamp};

/// Items fire in time order; items scheduled for the same instant fire in
/// the order they were scheduled. Time never goes backwards: scheduling in
/// the past fires at the current time.
#[derive(Debug, Clone)]
pub struct VirtualClock<T> {
    now: Timestamp,
    next_seq: u64,
    pending: BTreeMap<(Timestamp, u64), T>,
}

impl<T> Default for VirtualClock<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> VirtualClock<T> {
    pub fn new() -> Self {
        Self {
            now: Timestamp::ZERO,
            next_seq: 0,
            pending: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn schedule(&mut self, at: Timestamp, item: T) {
        let at = at.max(self.now);
        self.next_seq += 1;
        self.pending.insert((at, self.next_seq), item);
    }

    pub fn peek_time(&self) -> Option<Timestamp> {
        self.pending.keys().next().map(|(t, _)| *t)
    }

    pub fn pop(&mut self) -> Option<(Timestamp, T)> {
        let ((at, _), item) = self.pending.pop_first()?;
        self.now = at;
        Some((at, item))
    }

    /// Moves time forward without firing anything.
    pub fn advance_to(&mut self, at: Timestamp) {
        self.now = self.now.max(at);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

impl<T: Send + Sync> Clock for VirtualClock<T> {
    fn now(&self) -> Timestamp {
        self.now
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_fire_in_insertion_order() {
        let mut c = VirtualClock::new();
        c.schedule(Timestamp(5), "b");
        c.schedule(Timestamp(1), "a");
        c.schedule(Timestamp(5), "c");
        let order: Vec<_> = std::iter::from_fn(|| c.pop().map(|(_, x)| x)).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }

    #[test]
    fn past_items_fire_now() {
        let mut c = VirtualClock::new();
        c.schedule(Timestamp(10), 1);
        c.pop();
        c.schedule(Timestamp(3), 2);
        assert_eq!(c.pop(), Some((Timestamp(10), 2)));
    }

    proptest! {
        #[test]
        fn time_never_decreases(times in proptest::collection::vec(0u64..1_000, 1..50)) {
            let mut c = VirtualClock::new();
            for (i, t) in times.iter().enumerate() {
                c.schedule(Timestamp(*t), i);
            }
            let mut last = Timestamp::ZERO;
            let mut seen = 0;
            while let Some((t, _)) = c.pop() {
                prop_assert!(t >= last);
                last = t;
                seen += 1;
                if seen % 3 == 0 {
                    c.schedule(Timestamp(t.0 / 2), usize::MAX);
                }
            }
        }
    }
}
