//! Kernel-sensitive metrics, the feedback signal derived from them, and the
//! per-line mutation schedule that the signal steers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minisim::{EventKind, RuntimeEvent};

/// Memory-leak ratio plus counts of each parallel construct, fences and
/// deep copies observed in one device run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelMetrics {
    pub ml: f64,
    pub pl: u64,
    pub ps: u64,
    pub pr: u64,
    pub fe: u64,
    pub dc: u64,
}

impl KernelMetrics {
    pub fn from_events(events: &[RuntimeEvent]) -> Self {
        let mut m = KernelMetrics::default();
        // variable -> (alloc bytes, dealloc bytes)
        let mut mem: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        let mut allocated: BTreeMap<&str, bool> = BTreeMap::new();
        for e in events {
            match e.kind {
                EventKind::Alloc => {
                    mem.entry(&e.name).or_default().0 += e.bytes;
                    allocated.insert(&e.name, true);
                }
                EventKind::Dealloc => mem.entry(&e.name).or_default().1 += e.bytes,
                EventKind::ParallelFor => m.pl += 1,
                EventKind::ParallelScan => m.ps += 1,
                EventKind::ParallelReduce => m.pr += 1,
                EventKind::Fence => m.fe += 1,
                EventKind::DeepCopy => m.dc += 1,
            }
        }
        if !allocated.is_empty() {
            let leaked = allocated.keys().filter(|v| mem[*v].0 != mem[*v].1).count();
            m.ml = leaked as f64 / allocated.len() as f64;
        }
        m
    }

    fn counts(&self) -> [u64; 5] {
        [self.pl, self.ps, self.pr, self.fe, self.dc]
    }
}

pub const SIGNAL_BOUND: f64 = 0.5;

/// Feedback in `[-0.5, 0.5]`: positive when the current run exercised more
/// device constructs and leaked less than the previous one.
pub fn signal(prev: &KernelMetrics, cur: &KernelMetrics) -> f64 {
    let mut total = prev.ml - cur.ml;
    for (p, c) in prev.counts().into_iter().zip(cur.counts()) {
        let (p, c) = (p as f64, c as f64);
        total += (c - p) / c.max(p).max(1.0);
    }
    (total / 6.0 / 2.0).clamp(-SIGNAL_BOUND, SIGNAL_BOUND)
}

/// Relative floor applied to every line probability, scaled by `1/n`.
pub const FLOOR_FACTOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("a schedule needs at least one line")]
    ZeroLines,
    #[error("line {line} is out of range for a schedule of {len} lines")]
    IndexOutOfRange { line: usize, len: usize },
}

/// Probability distribution over script lines; entries sum to one and none
/// falls under [`Schedule::floor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    probs: Vec<f64>,
}

impl Schedule {
    pub fn new(n: usize) -> Result<Self, ScheduleError> {
        if n == 0 {
            return Err(ScheduleError::ZeroLines);
        }
        Ok(Self::uniform(n))
    }

    /// Uniform over `n` lines; an empty schedule when `n` is zero.
    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n.max(1) as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn floor(&self) -> f64 {
        FLOOR_FACTOR / self.probs.len().max(1) as f64
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() * self.probs.iter().sum::<f64>();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    /// Scales line `line` by `1 + signal`, divides every entry by the new
    /// total, then lifts anything under the floor.
    pub fn update(&mut self, line: usize, signal: f64) -> Result<(), ScheduleError> {
        let len = self.probs.len();
        if line >= len {
            return Err(ScheduleError::IndexOutOfRange { line, len });
        }
        if signal == 0.0 {
            return Ok(());
        }
        self.probs[line] *= 1.0 + signal;
        let total: f64 = self.probs.iter().sum();
        for p in &mut self.probs {
            *p /= total;
        }
        self.apply_floor();
        Ok(())
    }

    fn apply_floor(&mut self) {
        let floor = self.floor();
        let n = self.probs.len();
        let mut pinned = vec![false; n];
        loop {
            let mut changed = false;
            for i in 0..n {
                if !pinned[i] && self.probs[i] < floor {
                    pinned[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let pinned_mass = floor * pinned.iter().filter(|p| **p).count() as f64;
            let free_mass: f64 = (0..n).filter(|i| !pinned[*i]).map(|i| self.probs[i]).sum();
            for i in 0..n {
                if pinned[i] {
                    self.probs[i] = floor;
                } else if free_mass > 0.0 {
                    self.probs[i] *= (1.0 - pinned_mass) / free_mass;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(kind: EventKind, name: &str, bytes: u64) -> RuntimeEvent {
        RuntimeEvent {
            kind,
            name: name.into(),
            bytes,
        }
    }

    fn mv(v: [u64; 6]) -> KernelMetrics {
        KernelMetrics {
            ml: v[0] as f64,
            pl: v[1],
            ps: v[2],
            pr: v[3],
            fe: v[4],
            dc: v[5],
        }
    }

    #[test]
    fn balanced_log_counts_constructs() {
        use EventKind::*;
        let mut log = vec![ev(Alloc, "x", 100)];
        log.extend((0..3).flat_map(|_| [ev(ParallelFor, "k", 0), ev(Fence, "k", 0)]));
        log.extend((0..2).map(|_| ev(DeepCopy, "x", 100)));
        log.push(ev(Dealloc, "x", 100));
        let m = KernelMetrics::from_events(&log);
        assert_eq!(m, mv([0, 3, 0, 0, 3, 2]));
        assert_eq!(KernelMetrics::from_events(&[]).ml, 0.0);
    }

    #[test]
    fn leak_fraction_compares_bytes() {
        use EventKind::*;
        let one_of_two = [ev(Alloc, "x", 100), ev(Alloc, "y", 50), ev(Dealloc, "x", 100)];
        assert_eq!(KernelMetrics::from_events(&one_of_two).ml, 0.5);
        // Same number of events but fewer bytes released.
        let partial = [ev(Alloc, "x", 100), ev(Dealloc, "x", 60)];
        assert_eq!(KernelMetrics::from_events(&partial).ml, 1.0);
        let resized = [ev(Alloc, "x", 40), ev(Alloc, "x", 60), ev(Dealloc, "x", 100)];
        assert_eq!(KernelMetrics::from_events(&resized).ml, 0.0);
    }

    #[test]
    fn signal_examples() {
        let zero = KernelMetrics::default();
        let up = mv([0, 4, 0, 2, 6, 2]);
        assert_eq!(signal(&up, &up), 0.0);
        assert!((signal(&zero, &up) - 1.0 / 3.0).abs() < 1e-15);
        assert!((signal(&mv([0, 10, 0, 0, 10, 10]), &zero) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn leak_increase_lowers_signal() {
        let a = mv([0, 10, 0, 4, 14, 2]);
        let b = KernelMetrics { ml: 0.5, ..a };
        assert!((signal(&a, &b) + 0.5 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn update_examples() {
        let mut s = Schedule::uniform(4);
        s.update(2, 0.0).unwrap();
        assert_eq!(s, Schedule::uniform(4));

        let mut s = Schedule::uniform(2);
        s.update(0, 0.5).unwrap();
        assert!((s.probs()[0] - 0.6).abs() < 1e-15);
        assert!((s.probs()[1] - 0.4).abs() < 1e-15);

        let mut s = Schedule::uniform(2);
        s.update(0, -0.5).unwrap();
        assert!((s.probs()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.probs()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn schedule_errors() {
        assert_eq!(Schedule::new(0), Err(ScheduleError::ZeroLines));
        assert_eq!(Schedule::new(1).unwrap().probs(), &[1.0]);
        let s = Schedule::new(19).unwrap();
        assert!((s.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut s = Schedule::uniform(3);
        assert_eq!(
            s.update(3, 0.1),
            Err(ScheduleError::IndexOutOfRange { line: 3, len: 3 })
        );
    }

    #[test]
    fn floor_holds_under_repeated_penalty() {
        let mut s = Schedule::uniform(3);
        for _ in 0..200 {
            s.update(0, -0.5).unwrap();
        }
        assert!((s.probs()[0] - s.floor()).abs() < 1e-18);
        assert!((s.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn metrics() -> impl Strategy<Value = KernelMetrics> {
        (0.0..=1.0f64, 0..500u64, 0..50u64, 0..500u64, 0..1000u64, 0..200u64).prop_map(
            |(ml, pl, ps, pr, fe, dc)| KernelMetrics {
                ml,
                pl,
                ps,
                pr,
                fe,
                dc,
            },
        )
    }

    proptest! {
        #[test]
        fn signal_is_bounded(a in metrics(), b in metrics()) {
            let s = signal(&a, &b);
            prop_assert!((-0.5..=0.5).contains(&s));
        }

        #[test]
        fn signal_sign_follows_each_metric(a in metrics(), b in metrics(), k in 0usize..5, bump in 1u64..100, dml in 0.0..=1.0f64) {
            let mut more = b;
            match k {
                0 => more.pl += bump,
                1 => more.ps += bump,
                2 => more.pr += bump,
                3 => more.fe += bump,
                _ => more.dc += bump,
            }
            prop_assert!(signal(&a, &more) >= signal(&a, &b));
            let leakier = KernelMetrics { ml: (b.ml + dml).min(1.0), ..b };
            prop_assert!(signal(&a, &leakier) <= signal(&a, &b));
        }

        #[test]
        fn schedule_stays_a_distribution(
            n in 1usize..40,
            steps in prop::collection::vec((0usize..40, -0.5f64..=0.5), 0..60),
        ) {
            let mut s = Schedule::uniform(n);
            for (line, sig) in steps {
                let line = line % n;
                let before = s.probs().to_vec();
                s.update(line, sig).unwrap();
                let after = s.probs();
                for j in (0..n).filter(|j| *j != line) {
                    let (r0, r1) = (before[line] / before[j], after[line] / after[j]);
                    if sig > 0.0 {
                        prop_assert!(r1 >= r0);
                    } else if sig < 0.0 {
                        prop_assert!(r1 <= r0);
                    } else {
                        prop_assert_eq!(r1, r0);
                    }
                }
                prop_assert!((after.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(after.iter().all(|p| *p >= s.floor() * (1.0 - 1e-12)));
            }
        }
    }
}
