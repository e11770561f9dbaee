//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uplat::fleet::{self, FleetSummary};
use uplat::qdisc::pie_probability;
use uplat::report::median;
use uplat::{Discipline, PieParams, SimTime, TestConfig, TestReport};

const SEEDS: u64 = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scenario(d: Discipline, seed: u64) -> TestConfig {
    let mut cfg = TestConfig { discipline: d, seed, load_flows: 4, ..TestConfig::default() };
    cfg.link.rate_bps = 10_000_000;
    cfg.link.base_rtt = SimTime::from_millis(10);
    cfg.probe_duration = SimTime::from_secs(7);
    cfg
}

fn run(cfg: &TestConfig) -> TestReport {
    uplat::run_latency_under_load(cfg).expect("valid scenario")
}

struct Matched {
    pie: Vec<TestReport>,
    fifo: Vec<TestReport>,
}

fn matched() -> Matched {
    let runs = |d| (1..=SEEDS).map(|s| run(&scenario(d, s))).collect::<Vec<_>>();
    Matched { pie: runs(Discipline::DocsisPie), fifo: runs(Discipline::BufferControlFifo) }
}

fn mean(r: &TestReport) -> f64 {
    r.mean_ms().expect("samples")
}

fn max(r: &TestReport) -> f64 {
    r.max_ms().expect("samples")
}

fn aqm_band(m: &Matched) -> Outcome {
    let ok = m.pie.iter().filter(|r| (15.0..=30.0).contains(&mean(r))).count();
    let means: Vec<f64> = m.pie.iter().map(mean).collect();
    check(
        ok >= 95,
        format!("{ok}/{SEEDS} PIE means in [15, 30] ms (median {:.2} ms)", median(&means).unwrap()),
    )
}

fn fifo_level(m: &Matched) -> Outcome {
    let ok = m
        .fifo
        .iter()
        .filter(|r| (150.0..=300.0).contains(&mean(r)) && max(r) >= 240.0)
        .count();
    let means: Vec<f64> = m.fifo.iter().map(mean).collect();
    let maxes: Vec<f64> = m.fifo.iter().map(max).collect();
    check(
        ok >= 95,
        format!(
            "{ok}/{SEEDS} FIFO runs with mean in [150, 300] ms and max >= 240 ms (median mean {:.1}, median max {:.1})",
            median(&means).unwrap(),
            median(&maxes).unwrap()
        ),
    )
}

fn ratio(m: &Matched) -> Outcome {
    let pie: Vec<f64> = m.pie.iter().map(mean).collect();
    let fifo: Vec<f64> = m.fifo.iter().map(mean).collect();
    let r = median(&fifo).unwrap() / median(&pie).unwrap();
    check((6.0..=16.0).contains(&r), format!("median FIFO mean / median PIE mean = {r:.2}, want [6, 16]"))
}

fn fleet_histogram(s: &FleetSummary) -> Outcome {
    let pie = s.variant(Discipline::DocsisPie).expect("pie devices").band_fraction();
    let fifo = s.variant(Discipline::BufferControlFifo).expect("fifo devices").band_fraction();
    check(
        (0.70..=0.84).contains(&pie) && fifo <= 0.05,
        format!("[15,30) fraction: PIE {pie:.3} (want [0.70, 0.84]), FIFO {fifo:.3} (want <= 0.05)"),
    )
}

fn tail(s: &FleetSummary) -> Outcome {
    let frac_above = |d, t: f64| {
        let maxes = s.maxes(Some(d));
        maxes.iter().filter(|&&m| m > t).count() as f64 / maxes.len() as f64
    };
    let fifo = frac_above(Discipline::BufferControlFifo, 1000.0);
    let pie = frac_above(Discipline::DocsisPie, 150.0);
    check(
        fifo >= 0.05 && pie == 0.0,
        format!("FIFO max > 1000 ms: {:.1}% (want >= 5%), PIE max > 150 ms: {:.1}% (want 0%)", fifo * 100.0, pie * 100.0),
    )
}

fn consistency(s: &FleetSummary) -> Outcome {
    let pie: Vec<_> = s.results(Some(Discipline::DocsisPie)).collect();
    let uniform = pie.iter().filter(|r| r.max_ms / r.mean_ms <= 3.0).count() as f64 / pie.len() as f64;
    let spread = |d| {
        let v: Vec<f64> = s.results(Some(d)).map(|r| r.max_ms - r.mean_ms).collect();
        median(&v).unwrap()
    };
    let (fifo_spread, pie_spread) = (spread(Discipline::BufferControlFifo), spread(Discipline::DocsisPie));
    let gap = fifo_spread - pie_spread;
    check(
        uniform >= 0.99 && gap >= 50.0,
        format!(
            "PIE max/mean <= 3 for {:.1}% of devices (want >= 99%); median(max - mean) FIFO {fifo_spread:.1} ms vs PIE {pie_spread:.1} ms, gap {gap:.1} ms (want >= 50)",
            uniform * 100.0
        ),
    )
}

fn throughput(m: &Matched) -> Outcome {
    let mut pairs: Vec<(String, f64, f64)> = m
        .pie
        .iter()
        .zip(&m.fifo)
        .map(|(p, f)| (p.config.seed.to_string(), p.achieved_throughput_bps, f.achieved_throughput_bps))
        .collect();
    for rate in [5u64, 20, 35] {
        for flows in [1u32, 8] {
            for seed in 1..=5 {
                let mut pie = scenario(Discipline::DocsisPie, seed);
                pie.link.rate_bps = rate * 1_000_000;
                pie.load_flows = flows;
                let fifo = TestConfig { discipline: Discipline::BufferControlFifo, ..pie.clone() };
                pairs.push((
                    format!("{rate}M/{flows}f/{seed}"),
                    run(&pie).achieved_throughput_bps,
                    run(&fifo).achieved_throughput_bps,
                ));
            }
        }
    }
    let worst = pairs
        .iter()
        .map(|(k, p, f)| (k, p / f))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("scenarios");
    let ok = pairs.iter().all(|(_, p, f)| *p >= 0.90 * f);
    check(
        ok,
        format!("{} matched scenarios, worst PIE/FIFO throughput {:.4} at {} (want >= 0.90)", pairs.len(), worst.1, worst.0),
    )
}

/// Single CBR source at twice the link rate into a FIFO of `limit` bytes.
fn fifo_oracle_case(limit: u64, rate_bps: u64) -> (bool, String) {
    let mut cfg = TestConfig {
        discipline: Discipline::BufferControlFifo,
        load_flows: 0,
        fifo_limit_bytes: Some(limit),
        cross_rate_bps: 2 * rate_bps,
        cross_packet_bytes: 1500,
        seed: 7,
        ..TestConfig::default()
    };
    cfg.link.rate_bps = rate_bps;
    cfg.probe_duration = SimTime::from_secs(4);
    let report = run(&cfg);

    // integer nanoseconds: fixed path delays plus the drain time of a full buffer
    let drain_ns = (u128::from(limit) * 8 * 1_000_000_000).div_ceil(u128::from(rate_bps)) as u64;
    let fixed_ns = cfg.link.mac_access_delay.as_nanos() + cfg.link.base_rtt.as_nanos();
    let expected = fixed_ns + drain_ns;
    let tol = (1500u128 * 8 * 1_000_000_000).div_ceil(u128::from(rate_bps)) as u64;

    let answered: Vec<u64> = report
        .samples
        .iter()
        .map(|s| s.rtt_ns)
        .filter(|&r| r < cfg.probe_timeout.as_nanos())
        .collect();
    let worst = answered.iter().map(|&r| r.abs_diff(expected)).max().unwrap_or(u64::MAX);
    (
        !answered.is_empty() && worst <= tol,
        format!(
            "L={limit} R={rate_bps}: expect {} ms, worst deviation {} us over {} answered probes (tol {} us)",
            expected as f64 / 1e6,
            worst as f64 / 1e3,
            answered.len(),
            tol as f64 / 1e3
        ),
    )
}

fn fifo_oracle() -> Outcome {
    let cases = [(312_500, 10_000_000), (156_250, 5_000_000), (100_000, 20_000_000)];
    let results: Vec<(bool, String)> = cases.iter().map(|&(l, r)| fifo_oracle_case(l, r)).collect();
    check(
        results.iter().all(|r| r.0),
        results.iter().map(|r| r.1.clone()).collect::<Vec<_>>().join("; "),
    )
}

/// Written out step by step, without the library's scale helper.
fn reference_update(p: f64, qdelay_s: f64, qdelay_old_s: f64, prm: &PieParams) -> f64 {
    let target = prm.latency_target.as_secs_f64();
    let delta = prm.gain_a * (qdelay_s - target) + prm.gain_b * (qdelay_s - qdelay_old_s);
    let scale = match p {
        p if p < 0.000001 => 1.0 / 2048.0,
        p if p < 0.00001 => 1.0 / 512.0,
        p if p < 0.0001 => 1.0 / 128.0,
        p if p < 0.001 => 1.0 / 32.0,
        p if p < 0.01 => 1.0 / 8.0,
        p if p < 0.1 => 1.0 / 2.0,
        _ => 1.0,
    };
    let mut next = p + scale * delta;
    if qdelay_s == 0.0 && qdelay_old_s == 0.0 {
        next *= 0.98;
    }
    next.clamp(0.0, 1.0)
}

fn pie_oracle() -> Outcome {
    let prm = PieParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for i in 0..10_000 {
        // log-spread probabilities so every scale band is visited
        let p = match i % 4 {
            0 => 0.0,
            1 => 10f64.powf(rng.random_range(-7.0..0.0)),
            _ => rng.random_range(0.0..=1.0),
        };
        let zero_run = i % 10 == 0;
        let q = if zero_run { 0 } else { rng.random_range(0..300_000_000u64) };
        let q_old = if zero_run || i % 7 == 0 { 0 } else { rng.random_range(0..300_000_000u64) };
        let got = pie_probability(p, SimTime(q), SimTime(q_old), &prm);
        let want = reference_update(p, SimTime(q).as_secs_f64(), SimTime(q_old).as_secs_f64(), &prm);
        if got.to_bits() != want.to_bits() {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 10000 random states"))
}

fn files_identical(a: &Path, b: &Path) -> Result<(), String> {
    for name in [
        fleet::DEVICES_CSV,
        fleet::CDF_MEAN_CSV,
        fleet::CDF_MAX_CSV,
        fleet::HISTOGRAM_CSV,
        fleet::SUMMARY_JSON,
        fleet::MANIFEST_JSON,
    ] {
        let x = fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        if x != y {
            return Err(format!("{name} differs"));
        }
    }
    Ok(())
}

fn run_cli_fleet(out: &Path, workers: usize) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_uplat"))
        .args(["fleet", "--seed", "42", "--workers", &workers.to_string(), "--out"])
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&status.stderr).into_owned())
    }
}

fn determinism(dir: &Path) -> (Outcome, Option<FleetSummary>) {
    let (a, b, c) = (dir.join("a"), dir.join("b"), dir.join("c"));
    let runs = [(&a, 8), (&b, 8), (&c, 1)];
    for (out, workers) in runs {
        if let Err(e) = run_cli_fleet(out, workers) {
            return (check(false, format!("fleet run failed: {e}")), None);
        }
    }
    let twice = files_identical(&a, &b);
    let summary = FleetSummary::load(&a.join(fleet::SUMMARY_JSON)).ok();
    let sequential = FleetSummary::load(&c.join(fleet::SUMMARY_JSON)).ok();
    let workers_match = summary.is_some() && summary == sequential;
    let detail = format!(
        "fleet --seed 42 twice: {}; --workers 1 vs 8 summaries: {}",
        match &twice {
            Ok(()) => "byte-identical".to_string(),
            Err(e) => e.clone(),
        },
        if workers_match { "identical" } else { "differ" }
    );
    (check(twice.is_ok() && workers_match, detail), summary)
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let m = matched();
    // Criterion 10 runs the default fleet through the CLI; criteria 4-6 reuse it.
    let (det, summary) = determinism(dir.path());
    let fleet_result = |f: fn(&FleetSummary) -> Outcome| match &summary {
        Some(s) => f(s),
        None => check(false, "default fleet unavailable".into()),
    };

    let results = [
        ("AQM latency band", aqm_band(&m)),
        ("non-AQM latency level", fifo_level(&m)),
        ("FIFO/PIE mean ratio", ratio(&m)),
        ("fleet [15,30) histogram", fleet_result(fleet_histogram)),
        ("max-latency tail", fleet_result(tail)),
        ("consistency", fleet_result(consistency)),
        ("throughput preservation", throughput(&m)),
        ("FIFO analytic oracle", fifo_oracle()),
        ("PIE oracle equivalence", pie_oracle()),
        ("determinism", det),
    ];

    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {:>2} {:<26} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
