//! Population-scale runs: randomized device scenarios, parallel execution,
//! and aggregation into CDFs and histograms per discipline.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{run_latency_under_load, TestConfig};
use crate::qdisc::Discipline;
use crate::report::{self, fmt_sig6, quantize, CdfPoint, BIN_WIDTH_MS, REGULAR_BINS};
use crate::sim::{RngStream, SimTime};

/// Largest tolerated share of invalid device reports.
pub const MAX_INVALID_FRACTION: f64 = 0.01;

pub const DEVICES_CSV: &str = "devices.csv";
pub const CDF_MEAN_CSV: &str = "cdf_mean.csv";
pub const CDF_MAX_CSV: &str = "cdf_max.csv";
pub const HISTOGRAM_CSV: &str = "histogram.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MANIFEST_JSON: &str = "manifest.json";

const DEVICE_COLUMNS: [&str; 8] =
    ["device_id", "discipline", "rate_bps", "flows", "base_rtt_ms", "mean_ms", "max_ms", "p99_ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mix {
    pub docsis_pie: f64,
    pub buffer_control_fifo: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Mix { docsis_pie: 0.68, buffer_control_fifo: 0.32 }
    }
}

impl Mix {
    pub fn only(d: Discipline) -> Self {
        match d {
            Discipline::DocsisPie => Mix { docsis_pie: 1.0, buffer_control_fifo: 0.0 },
            Discipline::BufferControlFifo => Mix { docsis_pie: 0.0, buffer_control_fifo: 1.0 },
        }
    }

    pub fn fraction(&self, d: Discipline) -> f64 {
        match d {
            Discipline::DocsisPie => self.docsis_pie,
            Discipline::BufferControlFifo => self.buffer_control_fifo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatePlan {
    pub rate_bps: u64,
    pub weight: f64,
}

/// How base RTTs are drawn from `base_rtt_range_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RttLaw {
    Uniform,
    LogUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub devices: u32,
    pub master_seed: u64,
    pub mix: Mix,
    pub rate_plans: Vec<RatePlan>,
    /// Inclusive range of load flow counts.
    pub flows_range: [u32; 2],
    pub base_rtt_range_ms: [f64; 2],
    pub base_rtt_law: RttLaw,
    /// Share of FIFO devices whose buffer is oversized.
    pub bloated_fraction: f64,
    pub bloated_buffer_range_ms: [f64; 2],
    /// Per-test settings shared by every device; scenario fields are overwritten.
    pub template: TestConfig,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            devices: 1000,
            master_seed: 42,
            mix: Mix::default(),
            rate_plans: [5, 10, 20, 35]
                .into_iter()
                .map(|m| RatePlan { rate_bps: m * 1_000_000, weight: 1.0 })
                .collect(),
            flows_range: [1, 8],
            base_rtt_range_ms: [5.0, 25.0],
            base_rtt_law: RttLaw::LogUniform,
            bloated_fraction: 0.15,
            bloated_buffer_range_ms: [500.0, 1500.0],
            template: TestConfig::default(),
        }
    }
}

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let fracs = [self.mix.docsis_pie, self.mix.buffer_control_fifo];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mix fractions must lie in [0, 1] and sum to 1");
        }
        if self.rate_plans.is_empty()
            || self.rate_plans.iter().any(|p| p.rate_bps == 0 || !(p.weight >= 0.0 && p.weight.is_finite()))
            || self.rate_plans.iter().map(|p| p.weight).sum::<f64>() <= 0.0
        {
            return bad("rate_plans must be non-empty with positive rates and a positive total weight");
        }
        if self.flows_range[0] > self.flows_range[1] || self.flows_range[1] > 16 {
            return bad("flows_range must be a non-empty range within [0, 16]");
        }
        if !range_ok(self.base_rtt_range_ms) || self.base_rtt_range_ms[0] < 0.0 {
            return bad("base_rtt_range_ms must be a non-empty, non-negative range");
        }
        if self.base_rtt_law == RttLaw::LogUniform && self.base_rtt_range_ms[0] <= 0.0 {
            return bad("log_uniform base_rtt_law needs a positive lower bound");
        }
        if !(0.0..=1.0).contains(&self.bloated_fraction) {
            return bad("bloated_fraction must lie in [0, 1]");
        }
        if !range_ok(self.bloated_buffer_range_ms) || self.bloated_buffer_range_ms[0] < 0.0 {
            return bad("bloated_buffer_range_ms must be a non-empty, non-negative range");
        }
        self.template.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fleet config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Discipline of device `i`: the variant furthest below its quota over the
/// first `i + 1` devices. Depends on `i` only, so appending devices never
/// reassigns earlier ones.
pub fn assign_discipline(mix: &Mix, i: u32) -> Discipline {
    assign_all(mix, i + 1)[i as usize]
}

fn assign_all(mix: &Mix, n: u32) -> Vec<Discipline> {
    let mut counts = [0u64; 2];
    (0..u64::from(n))
        .map(|k| {
            let quota = (k + 1) as f64;
            let (idx, _) = Discipline::ALL
                .iter()
                .enumerate()
                .map(|(j, d)| (j, mix.fraction(*d) * quota - counts[j] as f64))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            counts[idx] += 1;
            Discipline::ALL[idx]
        })
        .collect()
}

/// One sampled device scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub device_id: u32,
    pub bloated: bool,
    pub test: TestConfig,
}

fn sample_device(cfg: &FleetConfig, id: u32, discipline: Discipline) -> Result<Device> {
    let mut rng = RngStream::new(cfg.master_seed, &format!("device/{id}"));

    let total: f64 = cfg.rate_plans.iter().map(|p| p.weight).sum();
    let mut u = rng.uniform(0.0, total)?;
    let mut rate_bps = cfg.rate_plans.last().expect("validated non-empty").rate_bps;
    for plan in &cfg.rate_plans {
        if u < plan.weight {
            rate_bps = plan.rate_bps;
            break;
        }
        u -= plan.weight;
    }

    let flows = rng.uniform_int(u64::from(cfg.flows_range[0]), u64::from(cfg.flows_range[1]))? as u32;
    let [lo, hi] = cfg.base_rtt_range_ms;
    let base_rtt_ms = match cfg.base_rtt_law {
        RttLaw::Uniform => rng.uniform(lo, hi)?,
        RttLaw::LogUniform => rng.uniform(lo.ln(), hi.ln())?.exp().clamp(lo, hi),
    };
    let bloat_draw = rng.next_f64();
    let [blo, bhi] = cfg.bloated_buffer_range_ms;
    let bloated_ms = rng.uniform(blo, bhi)?;
    let seed = rng.next_u64();

    let bloated = discipline == Discipline::BufferControlFifo && bloat_draw < cfg.bloated_fraction;
    let mut test = cfg.template.clone();
    test.label = format!("device-{id}");
    test.discipline = discipline;
    test.seed = seed;
    test.load_flows = flows;
    test.link.rate_bps = rate_bps;
    test.link.base_rtt = SimTime::from_millis_f64(base_rtt_ms);
    if bloated {
        test.fifo_buffer_delay = SimTime::from_millis_f64(bloated_ms);
        test.fifo_limit_bytes = None;
    }
    Ok(Device { device_id: id, bloated, test })
}

/// Device scenarios for the whole fleet. Device `i` depends only on
/// `(master_seed, i)` and the mix.
pub fn sample_population(cfg: &FleetConfig) -> Result<Vec<Device>> {
    cfg.validate()?;
    assign_all(&cfg.mix, cfg.devices)
        .into_iter()
        .enumerate()
        .map(|(i, d)| sample_device(cfg, i as u32, d))
        .collect()
}

/// Per-device outcome. Latencies are rounded to six significant digits, the
/// precision of the CSV artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceResult {
    pub device_id: u32,
    pub discipline: Discipline,
    pub rate_bps: u64,
    pub flows: u32,
    pub base_rtt_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidDevice {
    pub device_id: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub discipline: Discipline,
    pub devices: usize,
    pub mean_cdf: Vec<CdfPoint>,
    pub max_cdf: Vec<CdfPoint>,
    /// Fractions of device means per bin; the last entry is the overflow bin.
    pub histogram: Vec<f64>,
}

impl VariantSummary {
    /// Share of device means in [15, 30) ms.
    pub fn band_fraction(&self) -> f64 {
        self.histogram[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSummary {
    pub bin_width_ms: f64,
    pub regular_bins: usize,
    pub devices: Vec<DeviceResult>,
    pub invalid: Vec<InvalidDevice>,
    pub variants: Vec<VariantSummary>,
}

impl FleetSummary {
    /// Aggregates per-device results; `devices` must be sorted by id.
    pub fn from_results(devices: Vec<DeviceResult>, invalid: Vec<InvalidDevice>) -> Self {
        let variants = Discipline::ALL
            .iter()
            .filter_map(|&d| {
                let rows: Vec<&DeviceResult> = devices.iter().filter(|r| r.discipline == d).collect();
                if rows.is_empty() {
                    return None;
                }
                let means: Vec<f64> = rows.iter().map(|r| r.mean_ms).collect();
                let maxes: Vec<f64> = rows.iter().map(|r| r.max_ms).collect();
                Some(VariantSummary {
                    discipline: d,
                    devices: rows.len(),
                    mean_cdf: report::empirical_cdf(&means),
                    max_cdf: report::empirical_cdf(&maxes),
                    histogram: report::histogram(&means),
                })
            })
            .collect();
        FleetSummary {
            bin_width_ms: BIN_WIDTH_MS,
            regular_bins: REGULAR_BINS,
            devices,
            invalid,
            variants,
        }
    }

    pub fn variant(&self, d: Discipline) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.discipline == d)
    }

    pub fn results(&self, d: Option<Discipline>) -> impl Iterator<Item = &DeviceResult> {
        self.devices.iter().filter(move |r| d.is_none_or(|d| r.discipline == d))
    }

    pub fn means(&self, d: Option<Discipline>) -> Vec<f64> {
        self.results(d).map(|r| r.mean_ms).collect()
    }

    pub fn maxes(&self, d: Option<Discipline>) -> Vec<f64> {
        self.results(d).map(|r| r.max_ms).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// Per-device CSV.
    pub fn devices_csv(&self) -> String {
        let mut out = DEVICE_COLUMNS.join(",") + "\n";
        for r in &self.devices {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.device_id,
                r.discipline,
                r.rate_bps,
                r.flows,
                fmt_sig6(r.base_rtt_ms),
                fmt_sig6(r.mean_ms),
                fmt_sig6(r.max_ms),
                fmt_sig6(r.p99_ms),
            ));
        }
        out
    }

    /// CDF CSV, rows ascending by value.
    pub fn cdf_csv(&self, max: bool) -> String {
        let mut rows: Vec<(f64, Discipline, f64)> = self
            .variants
            .iter()
            .flat_map(|v| {
                let cdf = if max { &v.max_cdf } else { &v.mean_cdf };
                cdf.iter().map(move |p| (p.value_ms, v.discipline, p.cumulative_fraction))
            })
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = String::from("variant,value_ms,cumulative_fraction\n");
        for (value, d, frac) in rows {
            out.push_str(&format!("{d},{},{}\n", fmt_sig6(value), fmt_sig6(frac)));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_low_ms,bin_high_ms,variant,fraction\n");
        for v in &self.variants {
            for (i, frac) in v.histogram.iter().enumerate() {
                let (lo, hi) = report::bin_edges(i);
                let hi = if hi.is_finite() { fmt_sig6(hi) } else { "inf".into() };
                out.push_str(&format!("{},{hi},{},{}\n", fmt_sig6(lo), v.discipline, fmt_sig6(*frac)));
            }
        }
        out
    }
}

fn run_device(dev: &Device) -> std::result::Result<DeviceResult, InvalidDevice> {
    let invalid = |reason: String| InvalidDevice { device_id: dev.device_id, reason };
    let report = run_latency_under_load(&dev.test).map_err(|e| invalid(e.to_string()))?;
    let stats = match (report.valid, report.stats) {
        (true, Some(s)) => s,
        _ => return Err(invalid(report.invalid_reason.unwrap_or_else(|| "no samples".into()))),
    };
    Ok(DeviceResult {
        device_id: dev.device_id,
        discipline: dev.test.discipline,
        rate_bps: dev.test.link.rate_bps,
        flows: dev.test.load_flows,
        base_rtt_ms: quantize(dev.test.link.base_rtt.as_millis_f64()),
        mean_ms: quantize(stats.mean_ms),
        max_ms: quantize(stats.max_ms),
        p99_ms: quantize(stats.p99_ms),
    })
}

/// Runs every device on `workers` threads (0 = all cores) and merges by
/// device id. More than 1% invalid reports is an error.
pub fn run_fleet(population: &[Device], workers: usize) -> Result<FleetSummary> {
    if population.is_empty() {
        return Err(Error::InvalidArgument("fleet population is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| population.par_iter().map(run_device).collect());

    let mut devices = Vec::with_capacity(outcomes.len());
    let mut invalid = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => devices.push(r),
            Err(i) => invalid.push(i),
        }
    }
    let total = population.len();
    if invalid.len() as f64 > MAX_INVALID_FRACTION * total as f64 {
        return Err(Error::TooManyInvalid { invalid: invalid.len(), total });
    }
    devices.sort_by_key(|r| r.device_id);
    Ok(FleetSummary::from_results(devices, invalid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub master_seed: u64,
    pub devices: u32,
    pub valid_devices: usize,
    pub invalid_count: usize,
    pub files: Vec<String>,
    pub config: FleetConfig,
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the CSV artifacts and, when `config` is given, the JSON summary
/// and manifest. Returns the paths written.
pub fn emit_reports(summary: &FleetSummary, config: Option<&FleetConfig>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = vec![
        write_file(out_dir, DEVICES_CSV, &summary.devices_csv())?,
        write_file(out_dir, CDF_MEAN_CSV, &summary.cdf_csv(false))?,
        write_file(out_dir, CDF_MAX_CSV, &summary.cdf_csv(true))?,
        write_file(out_dir, HISTOGRAM_CSV, &summary.histogram_csv())?,
        write_file(out_dir, SUMMARY_JSON, &(summary.to_json() + "\n"))?,
    ];
    if let Some(cfg) = config {
        let manifest = Manifest {
            tool: "uplat".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            master_seed: cfg.master_seed,
            devices: cfg.devices,
            valid_devices: summary.devices.len(),
            invalid_count: summary.invalid.len(),
            files: [DEVICES_CSV, CDF_MEAN_CSV, CDF_MAX_CSV, HISTOGRAM_CSV, SUMMARY_JSON]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            config: cfg.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        written.push(write_file(out_dir, MANIFEST_JSON, &text)?);
    }
    Ok(written)
}

/// Parses a per-device CSV as written by [`FleetSummary::devices_csv`].
pub fn parse_devices_csv(text: &str, path: &Path) -> Result<Vec<DeviceResult>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::parse(path, e.to_string()))?;
    if header.iter().ne(DEVICE_COLUMNS) {
        return Err(Error::parse(path, format!("unexpected header: {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = reader
        .deserialize::<DeviceResult>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    rows.sort_by_key(|r| r.device_id);
    Ok(rows)
}

/// Rebuilds a summary from a per-device CSV file.
pub fn summary_from_devices_csv(path: &Path) -> Result<FleetSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(FleetSummary::from_results(parse_devices_csv(&text, path)?, Vec::new()))
}

/// Signed differences `a - b` for one group of devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    /// Discipline name, or `all`.
    pub group: String,
    pub median_mean_ms: f64,
    pub median_max_ms: f64,
    pub band_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<DeltaRow>,
    pub verdict: String,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<22} {:>18} {:>18} {:>16}\n",
            "group", "d_median_mean_ms", "d_median_max_ms", "d_15_30_fraction"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>18} {:>18} {:>16}\n",
                r.group,
                fmt_sig6(r.median_mean_ms),
                fmt_sig6(r.median_max_ms),
                fmt_sig6(r.band_fraction)
            ));
        }
        out.push_str(&self.verdict);
        out.push('\n');
        out
    }
}

fn group_stats(s: &FleetSummary, d: Option<Discipline>) -> Option<[f64; 3]> {
    let means = s.means(d);
    let band = means.iter().filter(|&&m| report::bin_index(m) == 1).count() as f64 / means.len().max(1) as f64;
    Some([report::median(&means)?, report::median(&s.maxes(d))?, band])
}

/// Compares two summaries: one row over all devices, then one per
/// discipline present in both.
pub fn compare(a: &FleetSummary, b: &FleetSummary) -> Result<Comparison> {
    if a.bin_width_ms != b.bin_width_ms || a.regular_bins != b.regular_bins {
        return Err(Error::BinMismatch);
    }
    let groups = std::iter::once(None).chain(Discipline::ALL.iter().map(|&d| Some(d)));
    let mut rows = Vec::new();
    for g in groups {
        if let (Some(x), Some(y)) = (group_stats(a, g), group_stats(b, g)) {
            rows.push(DeltaRow {
                group: g.map_or("all".to_string(), |d| d.to_string()),
                median_mean_ms: x[0] - y[0],
                median_max_ms: x[1] - y[1],
                band_fraction: x[2] - y[2],
            });
        }
    }
    let verdict = match rows.first() {
        None => "no devices in common groups".to_string(),
        Some(r) if r.median_mean_ms < 0.0 => {
            format!("first summary is lower: median of means {} ms below the second", fmt_sig6(-r.median_mean_ms))
        }
        Some(r) if r.median_mean_ms > 0.0 => {
            format!("second summary is lower: median of means {} ms below the first", fmt_sig6(r.median_mean_ms))
        }
        Some(_) => "summaries have equal median of means".to_string(),
    };
    Ok(Comparison { rows, verdict })
}
