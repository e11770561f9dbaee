//! One latency-under-load test, run in the measurement system's order:
//! admission, load start, ramp-up gate, timed probing, teardown.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::LinkConfig;
use crate::qdisc::{buffer_control_limit, Discipline, PieParams, BUFFER_CONTROL_DELAY};
use crate::sim::SimTime;
use crate::testbed::Testbed;
use crate::traffic::DEFAULT_PROBE_TIMEOUT;

/// Throughput sampling granularity for the ramp-up gate.
pub const RAMP_BIN: SimTime = SimTime::from_millis(100);
/// Length of each of the two consecutive windows the gate inspects.
pub const RAMP_WINDOW: SimTime = SimTime::from_millis(500);
/// Utilization each window must reach, as a fraction in per-mille.
pub const RAMP_THRESHOLD_PERMILLE: u64 = 900;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    pub label: String,
    pub discipline: Discipline,
    pub seed: u64,
    /// Number of upstream AIMD load flows.
    pub load_flows: u32,
    #[serde(rename = "probe_duration_ms", with = "crate::sim::serde_ms")]
    pub probe_duration: SimTime,
    /// Downstream test length; kept for symmetry, not simulated.
    #[serde(rename = "downstream_probe_duration_ms", with = "crate::sim::serde_ms")]
    pub downstream_probe_duration: SimTime,
    /// Probing starts here if the load never reaches steady state.
    #[serde(rename = "warmup_cap_ms", with = "crate::sim::serde_ms")]
    pub warmup_cap: SimTime,
    #[serde(rename = "probe_timeout_ms", with = "crate::sim::serde_ms")]
    pub probe_timeout: SimTime,
    /// Load keeps running at least this long after the last probe resolves.
    #[serde(rename = "load_tail_ms", with = "crate::sim::serde_ms")]
    pub load_tail: SimTime,
    /// Buffer-control drain time; sets the FIFO byte limit from the link rate.
    #[serde(rename = "fifo_buffer_delay_ms", with = "crate::sim::serde_ms")]
    pub fifo_buffer_delay: SimTime,
    /// Explicit FIFO limit, overriding `fifo_buffer_delay_ms`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fifo_limit_bytes: Option<u64>,
    pub mss: u32,
    pub initial_cwnd_pkts: u32,
    /// Defaults to the bottleneck buffer size in bytes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_ssthresh_bytes: Option<u64>,
    /// Constant-rate cross traffic offered to the upstream queue; 0 disables it.
    pub cross_rate_bps: u64,
    pub cross_packet_bytes: u32,
    pub link: LinkConfig,
    pub pie: PieParams,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            label: "upstream".into(),
            discipline: Discipline::DocsisPie,
            seed: 1,
            load_flows: 4,
            probe_duration: SimTime::from_secs(7),
            downstream_probe_duration: SimTime::from_secs(11),
            warmup_cap: SimTime::from_secs(5),
            probe_timeout: DEFAULT_PROBE_TIMEOUT,
            load_tail: SimTime::from_millis(250),
            fifo_buffer_delay: BUFFER_CONTROL_DELAY,
            fifo_limit_bytes: None,
            mss: 1500,
            initial_cwnd_pkts: 4,
            initial_ssthresh_bytes: None,
            cross_rate_bps: 0,
            cross_packet_bytes: 1500,
            link: LinkConfig::default(),
            pie: PieParams::default(),
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        self.pie.validate()?;
        if self.probe_duration == SimTime::ZERO {
            return Err(Error::Config("probe_duration must be positive".into()));
        }
        if self.probe_timeout == SimTime::ZERO {
            return Err(Error::Config("probe_timeout must be positive".into()));
        }
        if self.load_flows > 16 {
            return Err(Error::Config(format!(
                "load_flows must be within 0..=16, got {}",
                self.load_flows
            )));
        }
        if !(64..=1500).contains(&self.mss) {
            return Err(Error::Config(format!("mss {} outside [64, 1500]", self.mss)));
        }
        if self.cross_rate_bps > 0 && !(64..=1500).contains(&self.cross_packet_bytes) {
            return Err(Error::Config(format!(
                "cross_packet_bytes {} outside [64, 1500]",
                self.cross_packet_bytes
            )));
        }
        if self.fifo_limit_bytes == Some(0) {
            return Err(Error::Config("fifo_limit_bytes must be positive".into()));
        }
        Ok(())
    }

    pub fn fifo_limit(&self) -> u64 {
        self.fifo_limit_bytes
            .unwrap_or_else(|| buffer_control_limit(self.link.rate_bps, self.fifo_buffer_delay))
    }

    /// Byte capacity of the upstream queue under the configured discipline.
    pub fn buffer_bytes(&self) -> u64 {
        match self.discipline {
            Discipline::BufferControlFifo => self.fifo_limit(),
            Discipline::DocsisPie => self.pie.hard_limit_for(self.link.rate_bps),
        }
    }

    pub fn initial_ssthresh(&self) -> u64 {
        self.initial_ssthresh_bytes.unwrap_or_else(|| self.buffer_bytes())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("test config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// Peak load the measurement server must sustain for this test.
    pub fn demand_bps(&self) -> u64 {
        self.link.rate_bps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub max_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
}

fn nearest_rank(sorted: &[SimTime], pct: usize) -> SimTime {
    let rank = (pct * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Mean and nearest-rank percentiles. Censored samples count at their censor value.
pub fn summarize(samples: &[SimTime]) -> Result<LatencyStats> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let total: u128 = samples.iter().map(|s| u128::from(s.as_nanos())).sum();
    let mean_ns = total as f64 / samples.len() as f64;
    Ok(LatencyStats {
        mean_ms: mean_ns / 1e6,
        max_ms: sorted[sorted.len() - 1].as_millis_f64(),
        p50_ms: nearest_rank(&sorted, 50).as_millis_f64(),
        p90_ms: nearest_rank(&sorted, 90).as_millis_f64(),
        p99_ms: nearest_rank(&sorted, 99).as_millis_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RampUp {
    #[serde(rename = "ramp_up_at_ns")]
    pub at: SimTime,
    #[serde(rename = "ramp_up_detected")]
    pub detected: bool,
}

fn window_saturated(bytes: u64, rate_bps: u64, window: SimTime) -> bool {
    // bytes*8 >= 0.9 * rate * window, in integers
    let lhs = u128::from(bytes) * 8 * 1000 * 1_000_000_000;
    let rhs = u128::from(RAMP_THRESHOLD_PERMILLE) * u128::from(rate_bps) * u128::from(window.as_nanos());
    lhs >= rhs
}

/// First time two consecutive 500 ms windows of delivered load each reach 90%
/// of the shaped rate. `series[i]` holds the bytes delivered in
/// `[i*bin, (i+1)*bin)`. Falls back to `warmup_cap`, unflagged as detected.
pub fn detect_ramp_up(series: &[u64], bin: SimTime, shaped_rate_bps: u64, warmup_cap: SimTime) -> RampUp {
    assert!(bin > SimTime::ZERO && RAMP_WINDOW.as_nanos().is_multiple_of(bin.as_nanos()));
    let per_window = (RAMP_WINDOW.as_nanos() / bin.as_nanos()) as usize;
    let mut prefix = Vec::with_capacity(series.len() + 1);
    prefix.push(0u64);
    for b in series {
        prefix.push(prefix.last().unwrap() + b);
    }
    for end in (2 * per_window)..=series.len() {
        let second = prefix[end] - prefix[end - per_window];
        let first = prefix[end - per_window] - prefix[end - 2 * per_window];
        if window_saturated(first, shaped_rate_bps, RAMP_WINDOW)
            && window_saturated(second, shaped_rate_bps, RAMP_WINDOW)
        {
            let at = SimTime(bin.as_nanos() * end as u64);
            if at <= warmup_cap {
                return RampUp { at, detected: true };
            }
            break;
        }
    }
    RampUp {
        at: warmup_cap,
        detected: false,
    }
}

/// Measurement-server resource pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionState {
    pub server_capacity_bps: u64,
    pub reserved_bps: u64,
    pub client_busy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[must_use]
pub struct Reservation {
    pub demand_bps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Accepted(Reservation),
    RejectedRetryLater,
}

impl AdmissionState {
    pub fn new(server_capacity_bps: u64) -> Self {
        AdmissionState {
            server_capacity_bps,
            reserved_bps: 0,
            client_busy: false,
        }
    }

    /// Admits a test iff the server can carry its peak load and the client is idle.
    pub fn check(&mut self, demand_bps: u64) -> Admission {
        assert!(demand_bps > 0, "demand must be positive");
        if self.client_busy || self.reserved_bps + demand_bps > self.server_capacity_bps {
            return Admission::RejectedRetryLater;
        }
        self.reserved_bps += demand_bps;
        Admission::Accepted(Reservation { demand_bps })
    }

    /// Returns a finished test's resources to the pool.
    pub fn release(&mut self, r: Reservation) {
        self.reserved_bps -= r.demand_bps;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub seq: u64,
    pub rtt_ns: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub tail: u64,
    pub early: u64,
    pub overflow: u64,
    pub probe: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub label: String,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
    #[serde(flatten)]
    pub stats: Option<LatencyStats>,
    pub sample_count: usize,
    pub censored_count: u64,
    pub discarded_count: u64,
    pub achieved_throughput_bps: f64,
    #[serde(flatten)]
    pub ramp_up: RampUp,
    pub probe_start_ns: u64,
    pub probe_end_ns: u64,
    pub load_stop_ns: u64,
    pub drops: DropCounts,
    pub samples: Vec<ProbeSample>,
    pub config: TestConfig,
}

impl TestReport {
    pub fn rtts(&self) -> Vec<SimTime> {
        self.samples.iter().map(|s| SimTime(s.rtt_ns)).collect()
    }

    pub fn mean_ms(&self) -> Option<f64> {
        self.stats.map(|s| s.mean_ms)
    }

    pub fn max_ms(&self) -> Option<f64> {
        self.stats.map(|s| s.max_ms)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Two-column CSV of raw samples: `probe_seq,rtt_ms`.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("probe_seq,rtt_ms\n");
        for s in &self.samples {
            out.push_str(&format!("{},{}\n", s.seq, crate::report::fmt_sig6(s.rtt_ns as f64 / 1e6)));
        }
        out
    }
}

/// Runs one latency-under-load test. Callers are responsible for admission.
pub fn run_latency_under_load(cfg: &TestConfig) -> Result<TestReport> {
    cfg.validate()?;
    let mut bed = Testbed::new(cfg.clone());
    bed.run_to_completion();
    Ok(bed.into_report())
}

/// Admission-gated variant: reserves server capacity for the test's duration.
pub fn run_admitted(admission: &mut AdmissionState, cfg: &TestConfig) -> Result<Option<TestReport>> {
    match admission.check(cfg.demand_bps()) {
        Admission::RejectedRetryLater => Ok(None),
        Admission::Accepted(r) => {
            admission.client_busy = true;
            let report = run_latency_under_load(cfg);
            admission.client_busy = false;
            admission.release(r);
            report.map(Some)
        }
    }
}
