//! Event-driven wiring of one test: client hosts, the modem's upstream queue
//! and shaper, the access path, and the measurement server.

use crate::harness::{
    detect_ramp_up, summarize, DropCounts, ProbeSample, RampUp, TestConfig, TestReport, RAMP_BIN,
};
use crate::net::{
    deliver_downstream, deliver_upstream, serialize_time, shaper_next_departure, FlowId, Packet, PacketKind, ShaperState,
};
use crate::qdisc::{Discipline, Enqueue, FifoState, PieState, Qdisc};
use crate::sim::{EventQueue, RngStream, SimTime};
use crate::traffic::{AimdState, CbrSource, ProbeState};

const PROBE_FLOW: FlowId = FlowId(u32::MAX);
const CROSS_FLOW: FlowId = FlowId(u32::MAX - 1);

#[derive(Debug)]
enum Ev {
    FlowStart(u32),
    TxDone,
    ServerRx(Packet),
    AckRx { flow: u32, bytes: u64, sent_at: SimTime },
    LossDetected { flow: u32, bytes: u64 },
    ProbeResponse { seq: u64 },
    ProbeTimeout { seq: u64 },
    ProbeStop,
    PieUpdate,
    RampTick,
    CrossTx,
    LoadStop,
}

/// Per-flow packet accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Left the queue, not yet at the server.
    pub on_wire: u64,
}

struct BulkFlow {
    aimd: AimdState,
    counters: FlowCounters,
}

pub struct Testbed {
    cfg: TestConfig,
    events: EventQueue<Ev>,
    qdisc: Qdisc,
    shaper: ShaperState,
    link_busy: bool,
    in_service: Option<Packet>,
    flows: Vec<BulkFlow>,
    probe: ProbeState,
    probe_counters: FlowCounters,
    cross: Option<CbrSource>,
    cross_counters: FlowCounters,
    drop_rng: RngStream,
    next_packet_id: u64,
    load_active: bool,
    finished: bool,

    // load bytes delivered at the server, per ramp bin and in total
    ramp_series: Vec<u64>,
    bin_bytes: u64,
    delivered_load_bytes: u64,

    ramp_up: Option<RampUp>,
    probing: bool,
    probe_end: SimTime,
    load_bytes_at_probe_start: u64,
    load_bytes_at_probe_end: Option<u64>,
    load_stop: Option<SimTime>,
    probe_start: Option<SimTime>,
    drops: DropCounts,
    // highest packet id delivered per flow, for the ordering check
    last_delivered: std::collections::HashMap<FlowId, u64>,
    reordered: u64,
}

impl Testbed {
    pub fn new(cfg: TestConfig) -> Self {
        let qdisc = match cfg.discipline {
            Discipline::BufferControlFifo => Qdisc::Fifo(FifoState::new(cfg.fifo_limit())),
            Discipline::DocsisPie => Qdisc::Pie(PieState::new(cfg.pie.clone(), cfg.link.rate_bps)),
        };
        let ssthresh = cfg.initial_ssthresh() as f64;
        let flows = (0..cfg.load_flows)
            .map(|_| BulkFlow {
                aimd: AimdState::new(cfg.mss, cfg.initial_cwnd_pkts, ssthresh),
                counters: FlowCounters::default(),
            })
            .collect();
        let cross = (cfg.cross_rate_bps > 0).then_some(CbrSource {
            rate_bps: cfg.cross_rate_bps,
            packet_bytes: cfg.cross_packet_bytes,
            flow: CROSS_FLOW,
        });

        let mut events = EventQueue::new();
        for f in 0..cfg.load_flows {
            events.schedule(SimTime::ZERO, Ev::FlowStart(f));
        }
        if cross.is_some() {
            events.schedule(SimTime::ZERO, Ev::CrossTx);
        }
        if let Qdisc::Pie(_) = qdisc {
            events.schedule(cfg.pie.update_interval, Ev::PieUpdate);
        }
        events.schedule(RAMP_BIN, Ev::RampTick);

        Testbed {
            shaper: ShaperState::full(&cfg.link),
            probe: ProbeState::new(PROBE_FLOW, cfg.probe_timeout),
            drop_rng: RngStream::new(cfg.seed, "qdisc/drop"),
            cfg,
            events,
            qdisc,
            link_busy: false,
            in_service: None,
            flows,
            probe_counters: FlowCounters::default(),
            cross,
            cross_counters: FlowCounters::default(),
            next_packet_id: 0,
            load_active: true,
            finished: false,
            ramp_series: Vec::new(),
            bin_bytes: 0,
            delivered_load_bytes: 0,
            ramp_up: None,
            probing: false,
            probe_end: SimTime::MAX,
            load_bytes_at_probe_start: 0,
            load_bytes_at_probe_end: None,
            load_stop: None,
            probe_start: None,
            drops: DropCounts::default(),
            last_delivered: std::collections::HashMap::new(),
            reordered: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.events.now()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn qdisc(&self) -> &Qdisc {
        &self.qdisc
    }

    pub fn ramp_up(&self) -> Option<RampUp> {
        self.ramp_up
    }

    /// Load bytes delivered at the server per 100 ms bin so far.
    pub fn throughput_series(&self) -> &[u64] {
        &self.ramp_series
    }

    pub fn flow_counters(&self, flow: u32) -> FlowCounters {
        self.flows[flow as usize].counters
    }

    /// Packets of `flow` currently held in the upstream queue.
    pub fn queued_packets(&self, flow: u32) -> u64 {
        self.qdisc
            .packets()
            .iter()
            .filter(|p| p.flow == FlowId(flow))
            .count() as u64
    }

    pub fn aimd(&self, flow: u32) -> &AimdState {
        &self.flows[flow as usize].aimd
    }

    pub fn probe_counters(&self) -> FlowCounters {
        self.probe_counters
    }

    pub fn cross_counters(&self) -> FlowCounters {
        self.cross_counters
    }

    /// True while a packet is being serialized onto the link.
    pub fn is_transmitting(&self) -> bool {
        self.link_busy
    }

    /// Deliveries that arrived behind a later packet of the same flow.
    pub fn reordered(&self) -> u64 {
        self.reordered
    }

    /// Load bytes (bulk and cross) delivered at the server so far.
    pub fn delivered_load_bytes(&self) -> u64 {
        self.delivered_load_bytes
    }

    /// Dispatches events up to `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while !self.finished {
            let Some(ev) = self.events.pop_until(t) else {
                break;
            };
            self.dispatch(ev.payload);
        }
        if !self.finished {
            self.events.advance_to(t);
        }
    }

    pub fn run_to_completion(&mut self) {
        while !self.finished {
            let ev = self
                .events
                .pop_until(SimTime::MAX)
                .expect("periodic events keep the queue non-empty until load stop");
            self.dispatch(ev.payload);
        }
    }

    fn alloc_id(&mut self) -> u64 {
        let id = self.next_packet_id;
        self.next_packet_id += 1;
        id
    }

    fn dispatch(&mut self, ev: Ev) {
        let now = self.now();
        match ev {
            Ev::FlowStart(f) => self.try_send(f),
            Ev::TxDone => {
                let pkt = self.in_service.take().expect("transmission in progress");
                self.link_busy = false;
                let arrival = deliver_upstream(now, &self.cfg.link);
                self.events.schedule(arrival, Ev::ServerRx(pkt));
                self.start_transmission();
            }
            Ev::ServerRx(pkt) => self.server_receive(pkt),
            Ev::AckRx { flow, bytes, sent_at } => {
                let f = &mut self.flows[flow as usize];
                f.aimd.inflight_bytes -= bytes;
                f.aimd.on_rtt_sample(now - sent_at);
                f.aimd.on_ack(bytes);
                self.try_send(flow);
            }
            Ev::LossDetected { flow, bytes } => {
                let f = &mut self.flows[flow as usize];
                f.aimd.inflight_bytes -= bytes;
                f.aimd.on_loss(now);
                self.try_send(flow);
            }
            Ev::ProbeResponse { seq } => {
                self.probe.on_response(seq, now);
                self.probe_next();
            }
            Ev::ProbeTimeout { seq } => {
                if self.probe.outstanding.map(|(s, _)| s) == Some(seq) {
                    self.probe_next();
                }
            }
            Ev::ProbeStop => {
                self.probing = false;
                self.load_bytes_at_probe_end = Some(self.delivered_load_bytes);
                if self.probe.outstanding.is_none() {
                    self.schedule_load_stop();
                }
            }
            Ev::PieUpdate => {
                if let Qdisc::Pie(st) = &mut self.qdisc {
                    st.update(now);
                    let next = now + st.params.update_interval;
                    self.events.schedule(next, Ev::PieUpdate);
                }
            }
            Ev::RampTick => {
                self.ramp_series.push(self.bin_bytes);
                self.bin_bytes = 0;
                if self.ramp_up.is_none() {
                    self.check_ramp_up();
                }
                self.events.schedule(now + RAMP_BIN, Ev::RampTick);
            }
            Ev::CrossTx => {
                if self.load_active {
                    let src = self.cross.clone().expect("cross source configured");
                    let id = self.alloc_id();
                    let pkt = Packet::new(id, src.flow, PacketKind::Cross, src.packet_bytes, now);
                    self.cross_counters.sent += 1;
                    if self.enqueue(pkt).is_accepted() {
                        self.start_transmission();
                    } else {
                        self.cross_counters.dropped += 1;
                    }
                    self.events.schedule(now + src.interval(), Ev::CrossTx);
                }
            }
            Ev::LoadStop => {
                self.load_active = false;
                self.finished = true;
            }
        }
    }

    fn check_ramp_up(&mut self) {
        let now = self.now();
        let ramp = detect_ramp_up(&self.ramp_series, RAMP_BIN, self.cfg.link.rate_bps, self.cfg.warmup_cap);
        let start = if ramp.detected && ramp.at <= now {
            Some(ramp)
        } else if now >= self.cfg.warmup_cap {
            Some(RampUp {
                at: self.cfg.warmup_cap,
                detected: false,
            })
        } else {
            None
        };
        if let Some(r) = start {
            self.ramp_up = Some(r);
            self.start_probing();
        }
    }

    fn start_probing(&mut self) {
        let now = self.now();
        self.probing = true;
        self.probe_start = Some(now);
        self.probe_end = now + self.cfg.probe_duration;
        self.load_bytes_at_probe_start = self.delivered_load_bytes;
        self.events.schedule(self.probe_end, Ev::ProbeStop);
        self.probe_next();
    }

    /// Issues the next request while the probing window is open; otherwise
    /// resolves any expired request and, once idle, schedules teardown.
    fn probe_next(&mut self) {
        let now = self.now();
        if self.probing && now < self.probe_end {
            let id = self.alloc_id();
            if let Some(req) = self.probe.tick(now, id) {
                let seq = req.seq;
                self.probe_counters.sent += 1;
                if self.enqueue(req).is_accepted() {
                    self.start_transmission();
                } else {
                    self.probe_counters.dropped += 1;
                    self.drops.probe += 1;
                }
                self.events.schedule(now + self.cfg.probe_timeout, Ev::ProbeTimeout { seq });
            }
            return;
        }
        self.probe.expire(now);
        if self.probe.outstanding.is_none() && !self.probing && self.ramp_up.is_some() {
            self.schedule_load_stop();
        }
    }

    fn schedule_load_stop(&mut self) {
        if self.load_stop.is_none() {
            let at = self.now() + self.cfg.load_tail;
            self.load_stop = Some(at);
            self.events.schedule(at, Ev::LoadStop);
        }
    }

    /// Round trip seen by a segment of `size` bytes queued now.
    fn current_rtt(&self, size: u32) -> SimTime {
        let bytes = self.qdisc.backlog_bytes() + u64::from(size);
        serialize_time(bytes, self.cfg.link.rate_bps) + self.cfg.link.mac_access_delay + self.cfg.link.base_rtt
    }

    fn try_send(&mut self, flow: u32) {
        let now = self.now();
        let mss = self.cfg.mss;
        while self.load_active && self.flows[flow as usize].aimd.can_send() >= u64::from(mss) {
            let id = self.alloc_id();
            let pkt = Packet::new(id, FlowId(flow), PacketKind::Bulk, mss, now);
            let f = &mut self.flows[flow as usize];
            f.aimd.inflight_bytes += u64::from(mss);
            f.counters.sent += 1;
            if self.enqueue(pkt).is_accepted() {
                self.start_transmission();
            } else {
                self.flows[flow as usize].counters.dropped += 1;
                // the duplicate ACK for the next segment signals the loss
                let detect = now + self.current_rtt(mss);
                self.events.schedule(
                    detect,
                    Ev::LossDetected {
                        flow,
                        bytes: u64::from(mss),
                    },
                );
            }
        }
    }

    fn enqueue(&mut self, pkt: Packet) -> Enqueue {
        let now = self.now();
        let outcome = self.qdisc.enqueue(pkt, now, &mut self.drop_rng);
        match outcome {
            Enqueue::Accepted => {}
            Enqueue::DroppedTail => self.drops.tail += 1,
            Enqueue::DroppedEarly => self.drops.early += 1,
            Enqueue::DroppedOverflow => self.drops.overflow += 1,
        }
        outcome
    }

    fn start_transmission(&mut self) {
        if self.link_busy {
            return;
        }
        let Some(pkt) = self.qdisc.dequeue() else {
            return;
        };
        let now = self.now();
        let (finish, shaper) = shaper_next_departure(&self.shaper, pkt.size_bytes, now, &self.cfg.link);
        self.shaper = shaper;
        self.counters_mut(&pkt).on_wire += 1;
        self.in_service = Some(pkt);
        self.link_busy = true;
        self.events.schedule(finish, Ev::TxDone);
    }

    fn counters_mut(&mut self, pkt: &Packet) -> &mut FlowCounters {
        match pkt.kind {
            PacketKind::Bulk => &mut self.flows[pkt.flow.0 as usize].counters,
            PacketKind::Cross => &mut self.cross_counters,
            PacketKind::ProbeRequest | PacketKind::ProbeResponse => &mut self.probe_counters,
        }
    }

    fn server_receive(&mut self, pkt: Packet) {
        let now = self.now();
        {
            let c = self.counters_mut(&pkt);
            c.on_wire -= 1;
            c.delivered += 1;
        }
        let last = self.last_delivered.entry(pkt.flow).or_insert(pkt.id);
        if pkt.id < *last {
            self.reordered += 1;
        }
        *last = (*last).max(pkt.id);
        match pkt.kind {
            PacketKind::Bulk | PacketKind::Cross => {
                let bytes = u64::from(pkt.size_bytes);
                self.bin_bytes += bytes;
                self.delivered_load_bytes += bytes;
                if pkt.kind == PacketKind::Bulk {
                    self.events.schedule(
                        deliver_downstream(now, &self.cfg.link),
                        Ev::AckRx {
                            flow: pkt.flow.0,
                            bytes,
                            sent_at: pkt.created_at,
                        },
                    );
                }
            }
            PacketKind::ProbeRequest => {
                self.events.schedule(
                    deliver_downstream(now, &self.cfg.link),
                    Ev::ProbeResponse { seq: pkt.seq },
                );
            }
            PacketKind::ProbeResponse => unreachable!("responses travel downstream only"),
        }
    }

    pub fn into_report(self) -> TestReport {
        let ramp_up = self.ramp_up.unwrap_or(RampUp {
            at: self.cfg.warmup_cap,
            detected: false,
        });
        let probe_start = self.probe_start.unwrap_or(ramp_up.at);
        let window = self.probe_end.saturating_sub(probe_start);
        let end_bytes = self.load_bytes_at_probe_end.unwrap_or(self.delivered_load_bytes);
        let achieved_throughput_bps = if window > SimTime::ZERO {
            (end_bytes - self.load_bytes_at_probe_start) as f64 * 8.0 / window.as_secs_f64()
        } else {
            0.0
        };
        let samples: Vec<ProbeSample> = self
            .probe
            .samples
            .iter()
            .map(|&(seq, rtt)| ProbeSample {
                seq,
                rtt_ns: rtt.as_nanos(),
            })
            .collect();
        let rtts: Vec<SimTime> = self.probe.samples.iter().map(|s| s.1).collect();
        let (stats, valid, invalid_reason) = match summarize(&rtts) {
            Ok(s) => (Some(s), true, None),
            Err(e) => (None, false, Some(e.to_string())),
        };
        TestReport {
            label: self.cfg.label.clone(),
            valid,
            invalid_reason,
            stats,
            sample_count: samples.len(),
            censored_count: self.probe.censored,
            discarded_count: self.probe.discarded,
            achieved_throughput_bps,
            ramp_up,
            probe_start_ns: probe_start.as_nanos(),
            probe_end_ns: self.probe_end.min(self.now()).as_nanos(),
            load_stop_ns: self.load_stop.unwrap_or(self.now()).as_nanos(),
            drops: self.drops,
            samples,
            config: self.cfg,
        }
    }
}
