//! Traffic sources: AIMD bulk flows, the closed-loop UDP request/response
//! probe, and constant-rate cross traffic.

use crate::net::{FlowId, Packet, PacketKind};
use crate::sim::SimTime;

pub const PROBE_BYTES: u32 = 64;
pub const DEFAULT_PROBE_TIMEOUT: SimTime = SimTime::from_secs(3);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SlowStart,
    CongestionAvoidance,
}

/// Byte-counting AIMD window for one bulk flow.
#[derive(Debug, Clone)]
pub struct AimdState {
    pub cwnd_bytes: f64,
    pub ssthresh_bytes: f64,
    pub inflight_bytes: u64,
    pub mss: u32,
    pub phase: Phase,
    pub last_decrease: Option<SimTime>,
    /// Smoothed RTT (RFC 6298 gains); `None` until the first sample.
    pub srtt: Option<SimTime>,
}

impl AimdState {
    pub fn new(mss: u32, initial_cwnd_pkts: u32, ssthresh_bytes: f64) -> Self {
        let cwnd = f64::from(mss) * f64::from(initial_cwnd_pkts.max(2));
        AimdState {
            cwnd_bytes: cwnd,
            ssthresh_bytes,
            inflight_bytes: 0,
            mss,
            phase: if cwnd >= ssthresh_bytes {
                Phase::CongestionAvoidance
            } else {
                Phase::SlowStart
            },
            last_decrease: None,
            srtt: None,
        }
    }

    fn min_cwnd(&self) -> f64 {
        2.0 * f64::from(self.mss)
    }

    pub fn on_ack(&mut self, acked_bytes: u64) {
        assert!(acked_bytes > 0, "ack must cover at least one byte");
        let acked = acked_bytes as f64;
        match self.phase {
            Phase::SlowStart => {
                self.cwnd_bytes += acked;
                if self.cwnd_bytes >= self.ssthresh_bytes {
                    self.phase = Phase::CongestionAvoidance;
                }
            }
            Phase::CongestionAvoidance => {
                self.cwnd_bytes += f64::from(self.mss) * acked / self.cwnd_bytes;
            }
        }
    }

    /// Multiplicative decrease, at most once per smoothed RTT.
    /// Returns whether the window was cut.
    pub fn on_loss(&mut self, now: SimTime) -> bool {
        if let (Some(last), Some(srtt)) = (self.last_decrease, self.srtt) {
            if now.saturating_sub(last) < srtt {
                return false;
            }
        }
        self.cwnd_bytes = (self.cwnd_bytes / 2.0).max(self.min_cwnd());
        self.ssthresh_bytes = self.cwnd_bytes;
        self.phase = Phase::CongestionAvoidance;
        self.last_decrease = Some(now);
        true
    }

    pub fn on_rtt_sample(&mut self, rtt: SimTime) {
        self.srtt = Some(match self.srtt {
            None => rtt,
            Some(s) => SimTime((7 * s.as_nanos() + rtt.as_nanos()) / 8),
        });
    }

    /// Bytes that may be sent now, in whole segments.
    pub fn can_send(&self) -> u64 {
        let room = (self.cwnd_bytes - self.inflight_bytes as f64).max(0.0);
        let mss = u64::from(self.mss);
        (room as u64 / mss) * mss
    }
}

/// Closed-loop UDP request/response probe: one request outstanding at a time.
#[derive(Debug, Clone)]
pub struct ProbeState {
    pub next_seq: u64,
    pub outstanding: Option<(u64, SimTime)>,
    pub samples: Vec<(u64, SimTime)>,
    pub censored: u64,
    pub discarded: u64,
    pub timeout: SimTime,
    pub flow: FlowId,
}

impl ProbeState {
    pub fn new(flow: FlowId, timeout: SimTime) -> Self {
        ProbeState {
            next_seq: 0,
            outstanding: None,
            samples: Vec::new(),
            censored: 0,
            discarded: 0,
            timeout,
            flow,
        }
    }

    /// Emits the next request when nothing is outstanding. A request older than
    /// the timeout is abandoned and recorded as a sample at the timeout value.
    pub fn tick(&mut self, now: SimTime, packet_id: u64) -> Option<Packet> {
        self.expire(now);
        if self.outstanding.is_some() {
            return None;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.outstanding = Some((seq, now));
        Some(Packet::new(packet_id, self.flow, PacketKind::ProbeRequest, PROBE_BYTES, now).with_seq(seq))
    }

    /// Abandons a timed-out request, recording it at the timeout value.
    /// Returns whether a sample was censored.
    pub fn expire(&mut self, now: SimTime) -> bool {
        match self.outstanding {
            Some((seq, sent_at)) if now.saturating_sub(sent_at) >= self.timeout => {
                self.samples.push((seq, self.timeout));
                self.censored += 1;
                self.outstanding = None;
                true
            }
            _ => false,
        }
    }

    /// Records a response. Returns false (and counts a discard) for a stale or
    /// unknown sequence number.
    pub fn on_response(&mut self, seq: u64, now: SimTime) -> bool {
        match self.outstanding {
            Some((want, sent_at)) if want == seq => {
                let rtt = now - sent_at;
                debug_assert!(rtt > SimTime::ZERO);
                self.samples.push((seq, rtt));
                self.outstanding = None;
                true
            }
            _ => {
                self.discarded += 1;
                false
            }
        }
    }

    /// Time at which the outstanding request (if any) times out.
    pub fn deadline(&self) -> Option<SimTime> {
        self.outstanding.map(|(_, sent)| sent + self.timeout)
    }
}

/// Constant-bit-rate source of fixed-size packets, without feedback.
#[derive(Debug, Clone)]
pub struct CbrSource {
    pub rate_bps: u64,
    pub packet_bytes: u32,
    pub flow: FlowId,
}

impl CbrSource {
    pub fn interval(&self) -> SimTime {
        crate::net::serialize_time(u64::from(self.packet_bytes), self.rate_bps)
    }
}
