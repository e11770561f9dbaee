//! Access-path model: token-bucket rate shaper, serialization, constant
//! media-access delay and fixed propagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SimTime;

pub const MIN_PACKET_BYTES: u32 = 64;
pub const MAX_PACKET_BYTES: u32 = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    Bulk,
    ProbeRequest,
    ProbeResponse,
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub flow: FlowId,
    pub kind: PacketKind,
    /// Wire size including all header overhead.
    pub size_bytes: u32,
    pub created_at: SimTime,
    enqueued_at: Option<SimTime>,
    /// Probe sequence number, zero for other kinds.
    pub seq: u64,
}

impl Packet {
    pub fn new(id: u64, flow: FlowId, kind: PacketKind, size_bytes: u32, created_at: SimTime) -> Self {
        assert!(
            (MIN_PACKET_BYTES..=MAX_PACKET_BYTES).contains(&size_bytes),
            "packet size {size_bytes} outside [{MIN_PACKET_BYTES}, {MAX_PACKET_BYTES}]"
        );
        Packet {
            id,
            flow,
            kind,
            size_bytes,
            created_at,
            enqueued_at: None,
            seq: 0,
        }
    }

    pub fn with_seq(mut self, seq: u64) -> Self {
        self.seq = seq;
        self
    }

    pub fn enqueued_at(&self) -> Option<SimTime> {
        self.enqueued_at
    }

    /// Stamps admission to a queue. A packet is admitted at most once.
    pub fn mark_enqueued(&mut self, now: SimTime) {
        assert!(self.enqueued_at.is_none(), "packet {} enqueued twice", self.id);
        self.enqueued_at = Some(now);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    /// Shaped maximum sustained rate, bits per second.
    pub rate_bps: u64,
    /// Shaper burst depth.
    pub bucket_bytes: u64,
    /// Media-access delay added to every upstream transmission.
    #[serde(rename = "mac_access_delay_ms", with = "crate::sim::serde_ms")]
    pub mac_access_delay: SimTime,
    /// Round-trip propagation plus remote turnaround, excluding the bottleneck queue.
    #[serde(rename = "base_rtt_ms", with = "crate::sim::serde_ms")]
    pub base_rtt: SimTime,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            rate_bps: 10_000_000,
            bucket_bytes: 16 * 1500,
            mac_access_delay: SimTime::from_millis(2),
            base_rtt: SimTime::from_millis(10),
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rate_bps == 0 {
            return Err(Error::Config("link rate_bps must be positive".into()));
        }
        if self.bucket_bytes < u64::from(MAX_PACKET_BYTES) {
            return Err(Error::Config(format!(
                "shaper bucket_bytes {} is smaller than a {MAX_PACKET_BYTES} B packet",
                self.bucket_bytes
            )));
        }
        Ok(())
    }

    /// Fixed delay from shaper departure to arrival at the remote end.
    pub fn upstream_delay(&self) -> SimTime {
        self.mac_access_delay + self.base_rtt.half()
    }

    /// Fixed delay from the remote end back to the client. The downstream
    /// direction is uncongested in upstream tests.
    pub fn downstream_delay(&self) -> SimTime {
        self.base_rtt - self.base_rtt.half()
    }
}

/// Time to clock `size_bytes` onto a link at `rate_bps`, rounded up to whole
/// nanoseconds.
pub fn serialize_time(size_bytes: u64, rate_bps: u64) -> SimTime {
    assert!(rate_bps > 0, "rate must be positive");
    let bits = u128::from(size_bytes) * 8 * 1_000_000_000;
    let ns = bits.div_ceil(u128::from(rate_bps));
    SimTime(ns as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShaperState {
    pub tokens_bytes: f64,
    pub last_refill: SimTime,
}

impl ShaperState {
    /// A shaper that starts with a full bucket.
    pub fn full(link: &LinkConfig) -> Self {
        ShaperState {
            tokens_bytes: link.bucket_bytes as f64,
            last_refill: SimTime::ZERO,
        }
    }

    pub fn empty() -> Self {
        ShaperState {
            tokens_bytes: 0.0,
            last_refill: SimTime::ZERO,
        }
    }

    fn refill(&mut self, now: SimTime, link: &LinkConfig) {
        let elapsed = now.saturating_sub(self.last_refill);
        let added = elapsed.as_nanos() as f64 * link.rate_bps as f64 / 8e9;
        self.tokens_bytes = (self.tokens_bytes + added).min(link.bucket_bytes as f64);
        self.last_refill = self.last_refill.max(now);
    }
}

/// Earliest time the head packet finishes transmission, and the shaper state
/// after debiting it.
///
/// The packet is clocked out at the shaped rate; transmission cannot finish
/// before the bucket holds enough tokens for it. Token wait and serialization
/// overlap, so back-to-back packets leave exactly one serialization time apart.
pub fn shaper_next_departure(
    st: &ShaperState,
    size_bytes: u32,
    now: SimTime,
    link: &LinkConfig,
) -> (SimTime, ShaperState) {
    assert!(
        u64::from(size_bytes) <= link.bucket_bytes,
        "packet of {size_bytes} B exceeds shaper bucket"
    );
    let mut next = st.clone();
    next.refill(now, link);
    let size = f64::from(size_bytes);
    let deficit = (size - next.tokens_bytes).max(0.0);
    let token_wait = SimTime((deficit * 8e9 / link.rate_bps as f64).ceil() as u64);
    let finish = (now + serialize_time(u64::from(size_bytes), link.rate_bps)).max(now + token_wait);
    next.refill(finish, link);
    next.tokens_bytes = (next.tokens_bytes - size).max(0.0);
    (finish, next)
}

/// Arrival time at the remote endpoint of a packet that left the shaper at `departure`.
pub fn deliver_upstream(departure: SimTime, link: &LinkConfig) -> SimTime {
    departure + link.upstream_delay()
}

/// Arrival time at the client of a packet the remote end sent at `sent`.
pub fn deliver_downstream(sent: SimTime, link: &LinkConfig) -> SimTime {
    sent + link.downstream_delay()
}
