//! The two queue disciplines under comparison: tail-drop FIFO sized by static
//! buffer control, and the DOCSIS-PIE active queue manager.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Packet, MAX_PACKET_BYTES};
use crate::sim::{RngStream, SimTime};

/// Default static-buffer drain time for buffer control.
pub const BUFFER_CONTROL_DELAY: SimTime = SimTime::from_millis(250);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discipline {
    BufferControlFifo,
    DocsisPie,
}

impl Discipline {
    pub const ALL: [Discipline; 2] = [Discipline::DocsisPie, Discipline::BufferControlFifo];

    pub fn as_str(self) -> &'static str {
        match self {
            Discipline::BufferControlFifo => "buffer_control_fifo",
            Discipline::DocsisPie => "docsis_pie",
        }
    }
}

impl std::fmt::Display for Discipline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Discipline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "buffer_control_fifo" | "fifo" => Ok(Discipline::BufferControlFifo),
            "docsis_pie" | "pie" => Ok(Discipline::DocsisPie),
            other => Err(Error::Config(format!("unknown discipline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueue {
    Accepted,
    DroppedTail,
    DroppedEarly,
    DroppedOverflow,
}

impl Enqueue {
    pub fn is_accepted(self) -> bool {
        self == Enqueue::Accepted
    }
}

/// Byte limit whose full-buffer drain time at `rate_bps` is `target_delay`.
/// Never below one full-size packet.
pub fn buffer_control_limit(rate_bps: u64, target_delay: SimTime) -> u64 {
    assert!(rate_bps > 0, "rate must be positive");
    let bits = u128::from(rate_bps) * u128::from(target_delay.as_nanos());
    let bytes = bits.div_ceil(8 * 1_000_000_000) as u64;
    bytes.max(u64::from(MAX_PACKET_BYTES))
}

#[derive(Debug, Clone)]
pub struct FifoState {
    pub limit_bytes: u64,
    backlog_bytes: u64,
    queue: VecDeque<Packet>,
}

impl FifoState {
    pub fn new(limit_bytes: u64) -> Self {
        FifoState {
            limit_bytes,
            backlog_bytes: 0,
            queue: VecDeque::new(),
        }
    }

    pub fn backlog_bytes(&self) -> u64 {
        self.backlog_bytes
    }

    /// Tail drop: admits iff the packet fits within the limit.
    pub fn enqueue(&mut self, mut pkt: Packet, now: SimTime) -> Enqueue {
        let size = u64::from(pkt.size_bytes);
        if self.backlog_bytes + size > self.limit_bytes {
            return Enqueue::DroppedTail;
        }
        pkt.mark_enqueued(now);
        self.backlog_bytes += size;
        self.queue.push_back(pkt);
        Enqueue::Accepted
    }

    pub fn dequeue(&mut self) -> Option<Packet> {
        let pkt = self.queue.pop_front()?;
        self.backlog_bytes -= u64::from(pkt.size_bytes);
        Some(pkt)
    }
}

/// Controller constants. Durations are written in milliseconds in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PieParams {
    #[serde(rename = "latency_target_ms", with = "crate::sim::serde_ms")]
    pub latency_target: SimTime,
    #[serde(rename = "update_interval_ms", with = "crate::sim::serde_ms")]
    pub update_interval: SimTime,
    /// Proportional gain on (qdelay - target), per second.
    pub gain_a: f64,
    /// Gain on the qdelay trend, per second.
    pub gain_b: f64,
    #[serde(rename = "max_burst_ms", with = "crate::sim::serde_ms")]
    pub max_burst: SimTime,
    #[serde(rename = "burst_reset_ms", with = "crate::sim::serde_ms")]
    pub burst_reset: SimTime,
    pub mean_pktsize: u32,
    /// Early drop is skipped when the size-scaled probability is below this
    /// floor and the last delay sample is under `floor_queue_factor` targets.
    /// At 1/16, packets of 64 B are never early-dropped while `drop_prob < 1`.
    pub drop_floor: f64,
    pub floor_queue_factor: f64,
    /// Hard byte limit; `None` means the 250 ms buffer-control size for the link rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard_limit_bytes: Option<u64>,
}

impl Default for PieParams {
    fn default() -> Self {
        PieParams {
            latency_target: SimTime::from_millis(10),
            update_interval: SimTime::from_millis(16),
            gain_a: 0.25,
            gain_b: 2.5,
            max_burst: SimTime::from_millis(142),
            burst_reset: SimTime::from_secs(1),
            mean_pktsize: 1024,
            drop_floor: 0.0625,
            floor_queue_factor: 10.0,
            hard_limit_bytes: None,
        }
    }
}

impl PieParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latency_target", self.latency_target.as_nanos() > 0),
            ("update_interval", self.update_interval.as_nanos() > 0),
            ("gain_a", self.gain_a > 0.0),
            ("gain_b", self.gain_b > 0.0),
            ("max_burst", self.max_burst.as_nanos() > 0),
            ("burst_reset", self.burst_reset.as_nanos() > 0),
            ("mean_pktsize", self.mean_pktsize > 0),
            ("hard_limit_bytes", self.hard_limit_bytes.is_none_or(|b| b > 0)),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("pie parameter {name} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.drop_floor) {
            return Err(Error::Config("pie drop_floor must lie in [0, 1]".into()));
        }
        if !(self.floor_queue_factor >= 0.0 && self.floor_queue_factor.is_finite()) {
            return Err(Error::Config("pie floor_queue_factor must be finite and non-negative".into()));
        }
        if self.latency_target >= self.max_burst {
            return Err(Error::Config(
                "pie latency_target must be below max_burst".into(),
            ));
        }
        Ok(())
    }

    pub fn hard_limit_for(&self, rate_bps: u64) -> u64 {
        self.hard_limit_bytes
            .unwrap_or_else(|| buffer_control_limit(rate_bps, BUFFER_CONTROL_DELAY))
    }
}

/// Queueing delay estimate: backlog drained at the shaped rate.
pub fn pie_qdelay(backlog_bytes: u64, rate_bps: u64) -> SimTime {
    assert!(rate_bps > 0, "rate must be positive");
    let bits = u128::from(backlog_bytes) * 8 * 1_000_000_000;
    SimTime((bits / u128::from(rate_bps)) as u64)
}

/// Step-size scaling of the controller output, by current drop probability.
/// Small probabilities move in small steps so the controller stays stable
/// across light and heavy load.
pub fn pie_scale(p: f64) -> f64 {
    if p < 1e-6 {
        1.0 / 2048.0
    } else if p < 1e-5 {
        1.0 / 512.0
    } else if p < 1e-4 {
        1.0 / 128.0
    } else if p < 1e-3 {
        1.0 / 32.0
    } else if p < 1e-2 {
        1.0 / 8.0
    } else if p < 1e-1 {
        1.0 / 2.0
    } else {
        1.0
    }
}

/// One controller step: returns the new drop probability.
pub fn pie_probability(p: f64, qdelay: SimTime, qdelay_old: SimTime, params: &PieParams) -> f64 {
    let cur = qdelay.as_secs_f64();
    let old = qdelay_old.as_secs_f64();
    let target = params.latency_target.as_secs_f64();
    let delta = params.gain_a * (cur - target) + params.gain_b * (cur - old);
    let mut next = p + pie_scale(p) * delta;
    if qdelay == SimTime::ZERO && qdelay_old == SimTime::ZERO {
        next *= 0.98;
    }
    next.clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct PieState {
    pub drop_prob: f64,
    pub qdelay_cur: SimTime,
    pub qdelay_old: SimTime,
    pub burst_allowance: SimTime,
    pub last_update: SimTime,
    pub params: PieParams,
    pub rate_bps: u64,
    hard_limit_bytes: u64,
    idle_since: Option<SimTime>,
    backlog_bytes: u64,
    queue: VecDeque<Packet>,
}

impl PieState {
    /// A controller for a link that starts idle, with the burst allowance armed.
    pub fn new(params: PieParams, rate_bps: u64) -> Self {
        let hard_limit_bytes = params.hard_limit_for(rate_bps);
        PieState {
            drop_prob: 0.0,
            qdelay_cur: SimTime::ZERO,
            qdelay_old: SimTime::ZERO,
            burst_allowance: params.max_burst,
            last_update: SimTime::ZERO,
            params,
            rate_bps,
            hard_limit_bytes,
            idle_since: Some(SimTime::ZERO),
            backlog_bytes: 0,
            queue: VecDeque::new(),
        }
    }

    pub fn hard_limit_bytes(&self) -> u64 {
        self.hard_limit_bytes
    }

    pub fn backlog_bytes(&self) -> u64 {
        self.backlog_bytes
    }

    pub fn qdelay(&self) -> SimTime {
        pie_qdelay(self.backlog_bytes, self.rate_bps)
    }

    /// Periodic controller update; call once per `update_interval`.
    pub fn update(&mut self, now: SimTime) {
        debug_assert!(now >= self.last_update + self.params.update_interval || now == SimTime::ZERO);
        self.qdelay_cur = self.qdelay();
        self.drop_prob = pie_probability(self.drop_prob, self.qdelay_cur, self.qdelay_old, &self.params);
        self.qdelay_old = self.qdelay_cur;
        self.burst_allowance = self.burst_allowance.saturating_sub(self.params.update_interval);

        if self.drop_prob == 0.0 && self.backlog_bytes == 0 {
            let since = *self.idle_since.get_or_insert(now);
            if now - since >= self.params.burst_reset {
                self.burst_allowance = self.params.max_burst;
            }
        } else {
            self.idle_since = None;
        }
        self.last_update = now;
    }

    /// Drop-on-enqueue with burst, light-load and small-queue safeguards.
    pub fn enqueue(&mut self, mut pkt: Packet, now: SimTime, rng: &mut RngStream) -> Enqueue {
        let size = u64::from(pkt.size_bytes);
        if self.backlog_bytes + size > self.hard_limit_bytes {
            return Enqueue::DroppedOverflow;
        }
        let p = (self.drop_prob * size as f64 / f64::from(self.params.mean_pktsize)).min(1.0);
        // Always draw so the stream position depends only on the arrival sequence.
        let u = rng.next_f64();
        let floor_bypass = p < self.params.drop_floor
            && self.qdelay_old.as_secs_f64() < self.params.floor_queue_factor * self.params.latency_target.as_secs_f64();
        if !self.bypass_early_drop() && !floor_bypass && u < p {
            return Enqueue::DroppedEarly;
        }
        pkt.mark_enqueued(now);
        self.backlog_bytes += size;
        self.queue.push_back(pkt);
        Enqueue::Accepted
    }

    fn bypass_early_drop(&self) -> bool {
        let target = self.params.latency_target;
        self.burst_allowance > SimTime::ZERO
            || (self.drop_prob < 0.2 && self.qdelay_old < target.half())
            || self.backlog_bytes < 2 * u64::from(self.params.mean_pktsize)
    }

    pub fn dequeue(&mut self) -> Option<Packet> {
        let pkt = self.queue.pop_front()?;
        self.backlog_bytes -= u64::from(pkt.size_bytes);
        Some(pkt)
    }
}

/// Either discipline behind one interface.
#[derive(Debug, Clone)]
pub enum Qdisc {
    Fifo(FifoState),
    Pie(PieState),
}

impl Qdisc {
    pub fn discipline(&self) -> Discipline {
        match self {
            Qdisc::Fifo(_) => Discipline::BufferControlFifo,
            Qdisc::Pie(_) => Discipline::DocsisPie,
        }
    }

    pub fn enqueue(&mut self, pkt: Packet, now: SimTime, rng: &mut RngStream) -> Enqueue {
        match self {
            Qdisc::Fifo(st) => st.enqueue(pkt, now),
            Qdisc::Pie(st) => st.enqueue(pkt, now, rng),
        }
    }

    pub fn dequeue(&mut self) -> Option<Packet> {
        match self {
            Qdisc::Fifo(st) => st.dequeue(),
            Qdisc::Pie(st) => st.dequeue(),
        }
    }

    pub fn backlog_bytes(&self) -> u64 {
        match self {
            Qdisc::Fifo(st) => st.backlog_bytes,
            Qdisc::Pie(st) => st.backlog_bytes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn len(&self) -> usize {
        self.packets().len()
    }

    pub fn packets(&self) -> &VecDeque<Packet> {
        match self {
            Qdisc::Fifo(st) => &st.queue,
            Qdisc::Pie(st) => &st.queue,
        }
    }
}
