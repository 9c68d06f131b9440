use std::collections::BTreeMap;

use crate::machine::Pid;

/// Cache budget of one socket.
#[derive(Clone, Debug, PartialEq)]
pub struct SocketLedger {
    pub socket_id: usize,
    pub capacity: f64,
    pub available: f64,
    /// Open-nest footprint per resident process.
    pub residents: BTreeMap<Pid, f64>,
}

impl SocketLedger {
    pub fn new(socket_id: usize, capacity: f64) -> Self {
        SocketLedger {
            socket_id,
            capacity,
            available: capacity,
            residents: BTreeMap::new(),
        }
    }

    /// Charges `footprint` to `pid`, replacing any previous charge.
    pub fn add(&mut self, pid: Pid, footprint: f64) {
        self.residents.insert(pid, footprint);
        self.recompute();
    }

    pub fn remove(&mut self, pid: Pid) -> Option<f64> {
        let f = self.residents.remove(&pid);
        self.recompute();
        f
    }

    fn recompute(&mut self) {
        self.available = self.capacity - self.residents.values().sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn enter_then_complete_restores_availability() {
        let mut l = SocketLedger::new(0, 150.0);
        l.add(7, 100.0);
        assert_eq!(l.available, 50.0);
        assert_eq!(l.remove(7), Some(100.0));
        assert_eq!(l.available, 150.0);
        assert_eq!(l.remove(7), None);
    }

    proptest! {
        #[test]
        fn releases_are_order_independent(fps in prop::collection::vec(0.0f64..1e6, 1..12), seed in 0u64..1000) {
            let mut a = SocketLedger::new(0, 1e7);
            for (i, f) in fps.iter().enumerate() {
                a.add(i, *f);
            }
            let mut b = a.clone();
            let n = fps.len();
            for i in 0..n {
                a.remove(i);
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.rotate_left((seed as usize) % n);
            order.reverse();
            for i in order {
                b.remove(i);
            }
            prop_assert_eq!(a.available, b.available);
            prop_assert_eq!(a.available, 1e7);
        }
    }
}
