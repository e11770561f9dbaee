use uplat::testbed::{FlowCounters, Testbed};
use uplat::{Discipline, SimTime, TestConfig};

fn balanced(c: FlowCounters, queued: u64) -> bool {
    c.delivered + c.dropped + queued + c.on_wire == c.sent
}

#[test]
fn packet_conservation_at_every_sample() {
    for d in Discipline::ALL {
        let mut cfg = TestConfig { discipline: d, load_flows: 6, seed: 9, ..TestConfig::default() };
        cfg.link.rate_bps = 5_000_000;
        cfg.probe_duration = SimTime::from_secs(3);
        let mut bed = Testbed::new(cfg.clone());
        let mut t = SimTime::ZERO;
        let mut dropped = 0;
        while !bed.is_finished() {
            t += SimTime::from_micros(1_333);
            bed.run_until(t);
            for f in 0..cfg.load_flows {
                let c = bed.flow_counters(f);
                assert!(balanced(c, bed.queued_packets(f)), "{d} flow {f} at {t}: {c:?}");
            }
        }
        for f in 0..cfg.load_flows {
            dropped += bed.flow_counters(f).dropped;
        }
        assert!(dropped > 0, "{d}: scenario should exercise drops");
    }
}

#[test]
fn single_flow_saturates_within_three_seconds() {
    let mut cfg = TestConfig { load_flows: 1, ..TestConfig::default() };
    cfg.discipline = Discipline::BufferControlFifo;
    cfg.link.rate_bps = 10_000_000;
    let mut bed = Testbed::new(cfg.clone());
    bed.run_until(SimTime::from_secs(3));
    // last full second before the 3 s mark
    let bins = bed.throughput_series();
    let last: u64 = bins[bins.len() - 10..].iter().sum();
    let util = last as f64 * 8.0 / cfg.link.rate_bps as f64;
    assert!(util >= 0.9, "utilization {util}");
    assert!(bed.ramp_up().is_some_and(|r| r.detected));
}

#[test]
fn probe_load_is_negligible_under_load() {
    for d in Discipline::ALL {
        for rate in [5u64, 10, 20, 35] {
            let mut cfg = TestConfig { discipline: d, ..TestConfig::default() };
            cfg.link.rate_bps = rate * 1_000_000;
            cfg.probe_duration = SimTime::from_secs(3);
            let mut bed = Testbed::new(cfg.clone());
            bed.run_to_completion();
            let c = bed.probe_counters();
            let report = bed.into_report();
            let window = (report.probe_end_ns - report.probe_start_ns) as f64 / 1e9;
            // requests only: responses use the downstream path
            let bps = c.sent as f64 * 64.0 * 8.0 / window;
            assert!(bps <= 0.005 * cfg.link.rate_bps as f64, "{d} {rate}M: probe load {bps} bps");
        }
    }
}

#[test]
fn cwnd_never_below_two_segments() {
    let mut cfg = TestConfig { load_flows: 8, ..TestConfig::default() };
    cfg.discipline = Discipline::DocsisPie;
    cfg.link.rate_bps = 5_000_000;
    cfg.probe_duration = SimTime::from_secs(3);
    let mut bed = Testbed::new(cfg.clone());
    let mut t = SimTime::ZERO;
    while !bed.is_finished() {
        t += SimTime::from_millis(7);
        bed.run_until(t);
        for f in 0..cfg.load_flows {
            assert!(bed.aimd(f).cwnd_bytes >= 2.0 * f64::from(cfg.mss));
        }
    }
}
