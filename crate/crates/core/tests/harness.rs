use uplat::{run_latency_under_load, Discipline, SimTime, TestConfig};

fn cfg(d: Discipline, seed: u64) -> TestConfig {
    TestConfig { discipline: d, seed, ..TestConfig::default() }
}

#[test]
fn probing_stays_inside_the_load_window() {
    for d in Discipline::ALL {
        for seed in 0..5 {
            let r = run_latency_under_load(&cfg(d, seed)).unwrap();
            assert!(r.ramp_up.detected);
            assert!(r.probe_start_ns >= r.ramp_up.at.as_nanos());
            let resolved: u64 = r.samples.iter().map(|s| s.rtt_ns).sum();
            assert!(r.probe_start_ns + resolved <= r.load_stop_ns);
            assert!(r.probe_end_ns <= r.load_stop_ns);
            assert_eq!(r.sample_count, r.samples.len());
        }
    }
}

#[test]
fn reports_are_reproducible() {
    for d in Discipline::ALL {
        let c = cfg(d, 77);
        let a = run_latency_under_load(&c).unwrap();
        let b = run_latency_under_load(&c).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.samples_csv(), b.samples_csv());
    }
}

#[test]
fn seeds_change_pie_outcomes() {
    let a = run_latency_under_load(&cfg(Discipline::DocsisPie, 1)).unwrap();
    let b = run_latency_under_load(&cfg(Discipline::DocsisPie, 2)).unwrap();
    assert_ne!(a.samples, b.samples);
}

#[test]
fn matched_pairs_favor_pie() {
    for seed in 1..=100 {
        let p = run_latency_under_load(&cfg(Discipline::DocsisPie, seed)).unwrap().stats.unwrap();
        let f = run_latency_under_load(&cfg(Discipline::BufferControlFifo, seed)).unwrap().stats.unwrap();
        assert!(p.mean_ms < f.mean_ms, "seed {seed}");
        assert!(p.p99_ms < f.p99_ms, "seed {seed}");
        assert!(p.max_ms / p.mean_ms <= 3.0, "seed {seed}: {} / {}", p.max_ms, p.mean_ms);
    }
}

#[test]
fn idle_link_rtt_is_the_fixed_path() {
    let mut c = cfg(Discipline::BufferControlFifo, 1);
    c.load_flows = 0;
    c.probe_duration = SimTime::from_secs(1);
    let r = run_latency_under_load(&c).unwrap();
    // no load: the gate times out and probes see only fixed delays plus 64 B serialization
    assert!(!r.ramp_up.detected);
    let s = r.stats.unwrap();
    let fixed = c.link.base_rtt.as_millis_f64() + c.link.mac_access_delay.as_millis_f64();
    assert!((s.mean_ms - fixed).abs() < 0.1, "{} vs {fixed}", s.mean_ms);
}

#[test]
fn config_round_trips_through_toml() {
    let c = cfg(Discipline::BufferControlFifo, 9);
    assert_eq!(TestConfig::from_toml(&c.to_toml()).unwrap(), c);
    let partial = TestConfig::from_toml("discipline = \"buffer_control_fifo\"\n[link]\nrate_bps = 20000000\n").unwrap();
    assert_eq!(partial.link.rate_bps, 20_000_000);
    assert_eq!(partial.link.base_rtt, SimTime::from_millis(10));
    assert!(TestConfig::from_toml("load_flow = 3").is_err());
    assert!(TestConfig::from_toml("probe_duration_ms = -1.0").is_err());
}
