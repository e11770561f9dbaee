//! Discrete-event engine: integer-nanosecond clock, ordered event queue and
//! seeded random streams.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Simulation time in nanoseconds since the start of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }

    /// Rounds to the nearest nanosecond. Negative inputs clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e9).round().max(0.0) as u64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        SimTime((ms * 1e6).round().max(0.0) as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn half(self) -> SimTime {
        SimTime(self.0 / 2)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}ms", self.as_millis_f64())
    }
}

/// Serde adapter writing a [`SimTime`] as fractional milliseconds, for
/// human-edited config files.
pub mod serde_ms {
    use super::SimTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &SimTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(t.as_millis_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SimTime, D::Error> {
        let ms = f64::deserialize(d)?;
        if !ms.is_finite() || ms < 0.0 {
            return Err(serde::de::Error::custom(format!(
                "duration must be a non-negative number of milliseconds, got {ms}"
            )));
        }
        Ok(SimTime::from_millis_f64(ms))
    }
}

/// Returned by [`EventQueue::schedule`]; allows cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

/// A scheduled event. Equal `fire_at` values dispatch in ascending `seq`.
#[derive(Debug, Clone)]
pub struct Event<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: E,
}

impl<E> PartialEq for Event<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<E> Eq for Event<E> {}

impl<E> PartialOrd for Event<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Event<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

/// Ordered event queue with a monotone clock.
///
/// The payload type names its own target; dispatch is driven by the caller via
/// [`EventQueue::pop_until`] or [`EventQueue::run_until`].
#[derive(Debug)]
pub struct EventQueue<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Event<E>>>,
    cancelled: HashSet<u64>,
    dispatched: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            dispatched: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events dispatched so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Number of live (not cancelled) events still queued.
    pub fn pending(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    /// Schedules `payload` at `fire_at`.
    ///
    /// Scheduling in the past is a simulation bug and panics.
    pub fn schedule(&mut self, fire_at: SimTime, payload: E) -> EventHandle {
        assert!(
            fire_at >= self.now,
            "event scheduled in the past: fire_at={fire_at} now={}",
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event { fire_at, seq, payload }));
        EventHandle(seq)
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventHandle {
        self.schedule(self.now + delay, payload)
    }

    /// Cancels a pending event. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if self.heap.iter().any(|Reverse(ev)| ev.seq == handle.0) {
            self.cancelled.insert(handle.0)
        } else {
            false
        }
    }

    /// Pops the next live event with `fire_at <= t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Event<E>> {
        loop {
            let head = self.heap.peek()?;
            if head.0.fire_at > t_end {
                return None;
            }
            let Reverse(ev) = self.heap.pop().expect("peeked");
            if self.cancelled.remove(&ev.seq) {
                continue;
            }
            debug_assert!(ev.fire_at >= self.now);
            self.now = ev.fire_at;
            self.dispatched += 1;
            return Some(ev);
        }
    }

    /// Advances the clock to `t` without dispatching. `t` must not skip a
    /// pending event.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Dispatches every event with `fire_at <= t_end` through `handler`,
    /// including events scheduled during dispatch, then sets the clock to
    /// `t_end` and returns it.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> SimTime
    where
        F: FnMut(&mut Self, Event<E>),
    {
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
        }
        self.advance_to(t_end);
        self.now
    }
}

/// Counter-based random stream keyed by `(seed, label)`.
///
/// Backed by ChaCha8: the seed becomes the key, a hash of the label selects
/// the stream, and the word position is the draw counter. Streams with
/// different labels never share state.
#[derive(Debug, Clone)]
pub struct RngStream {
    label: String,
    rng: ChaCha8Rng,
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub(crate) fn stable_hash(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stable_hash(label.as_bytes()));
        RngStream {
            label: label.to_owned(),
            rng,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Uniform draw on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    /// Uniform draw on `[lo, hi)`; `lo == hi` returns `lo`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64, Error> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "uniform interval is empty: lo={lo} > hi={hi}"
            )));
        }
        let u = self.next_f64();
        if lo == hi {
            return Ok(lo);
        }
        let v = lo + u * (hi - lo);
        // lo + u*(hi-lo) can round up to hi for u close to 1.
        Ok(if v >= hi { lo.max(next_down(hi)) } else { v })
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn uniform_int(&mut self, lo: u64, hi: u64) -> Result<u64, Error> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "integer interval is empty: lo={lo} > hi={hi}"
            )));
        }
        Ok(self.rng.random_range(lo..=hi))
    }
}

fn next_down(x: f64) -> f64 {
    if x.is_nan() || x == f64::NEG_INFINITY {
        return x;
    }
    if x == 0.0 {
        return -f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits - 1)
    } else {
        f64::from_bits(bits + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatch_at_scheduled_time() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_millis(5), "a");
        let mut seen = Vec::new();
        q.run_until(SimTime::from_secs(1), |q, ev| seen.push((q.now(), ev.payload)));
        assert_eq!(seen, vec![(SimTime::from_millis(5), "a")]);
    }

    #[test]
    fn ties_dispatch_in_scheduling_order() {
        let mut q = EventQueue::new();
        let t = SimTime::from_millis(3);
        for name in ["first", "second", "third"] {
            q.schedule(t, name);
        }
        let mut seen = Vec::new();
        q.run_until(t, |_, ev| seen.push(ev.payload));
        assert_eq!(seen, vec!["first", "second", "third"]);
    }

    #[test]
    #[should_panic(expected = "in the past")]
    fn scheduling_in_the_past_faults() {
        let mut q: EventQueue<()> = EventQueue::new();
        q.run_until(SimTime::from_millis(2), |_, _| {});
        q.schedule(SimTime::from_millis(1), ());
    }

    #[test]
    fn empty_queue_runs_to_end() {
        let mut q: EventQueue<()> = EventQueue::new();
        let end = q.run_until(SimTime::from_secs(10), |_, _| {});
        assert_eq!(end, SimTime::from_secs(10));
        assert_eq!(q.dispatched(), 0);
    }

    #[test]
    fn run_until_leaves_later_events_pending() {
        let mut q = EventQueue::new();
        for ms in 1..=3 {
            q.schedule(SimTime::from_millis(ms), ms);
        }
        q.run_until(SimTime::from_millis(2), |_, _| {});
        assert_eq!(q.dispatched(), 2);
        assert_eq!(q.pending(), 1);
    }

    #[test]
    fn reentrant_events_are_drained() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_millis(1), 0u32);
        let mut count = 0;
        q.run_until(SimTime::from_millis(10), |q, ev| {
            count += 1;
            if ev.payload < 4 {
                q.schedule_in(SimTime::from_millis(1), ev.payload + 1);
            }
        });
        assert_eq!(count, 5);
        assert_eq!(q.pending(), 0);
    }

    #[test]
    fn cancelled_events_do_not_fire() {
        let mut q = EventQueue::new();
        let h = q.schedule(SimTime::from_millis(1), 'x');
        q.schedule(SimTime::from_millis(2), 'y');
        assert!(q.cancel(h));
        assert!(!q.cancel(h));
        let mut seen = Vec::new();
        q.run_until(SimTime::from_millis(5), |_, ev| seen.push(ev.payload));
        assert_eq!(seen, vec!['y']);
    }

    #[test]
    fn clock_is_monotone() {
        let mut q = EventQueue::new();
        let mut rng = RngStream::new(3, "sched");
        for _ in 0..500 {
            let t = rng.uniform_int(0, 1_000_000).unwrap();
            q.schedule(SimTime(t), ());
        }
        let mut last = SimTime::ZERO;
        q.run_until(SimTime::MAX, |q, _| {
            assert!(q.now() >= last);
            last = q.now();
        });
    }

    #[test]
    fn degenerate_interval() {
        let mut rng = RngStream::new(1, "x");
        assert_eq!(rng.uniform(3.0, 3.0).unwrap(), 3.0);
    }

    #[test]
    fn inverted_interval_is_an_error() {
        let mut rng = RngStream::new(1, "x");
        assert!(matches!(rng.uniform(2.0, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn same_seed_same_values() {
        let a: Vec<f64> = {
            let mut r = RngStream::new(99, "probe");
            (0..16).map(|_| r.uniform(0.0, 1.0).unwrap()).collect()
        };
        let b: Vec<f64> = {
            let mut r = RngStream::new(99, "probe");
            (0..16).map(|_| r.uniform(0.0, 1.0).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_of_unit_uniform() {
        let mut r = RngStream::new(2024, "lln");
        let n = 100_000;
        let mean = (0..n).map(|_| r.uniform(0.0, 1.0).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean={mean}");
    }

    #[test]
    fn streams_are_isolated() {
        // Interleaved consumption of "b" must not perturb "a".
        let mut solo = RngStream::new(5, "a");
        let solo_vals: Vec<u64> = (0..64).map(|_| solo.next_u64()).collect();

        let mut a = RngStream::new(5, "a");
        let mut b = RngStream::new(5, "b");
        let mut mixed = Vec::new();
        for i in 0..64 {
            for _ in 0..(i % 3) {
                b.next_u64();
            }
            mixed.push(a.next_u64());
        }
        assert_eq!(solo_vals, mixed);

        let mut a = RngStream::new(5, "a");
        let mut b = RngStream::new(5, "b");
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(stable_hash(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(stable_hash(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
