//! `uplat`: run single latency-under-load tests and fleet experiments.
//!
//! Exit codes: 0 success, 1 user error, 2 invariant violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use uplat::fleet::{self, FleetConfig, FleetSummary};
use uplat::{Error, TestConfig};

#[derive(Parser)]
#[command(name = "uplat", version, about = "Upstream latency-under-load simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one test from a TOML test config and write report.json and samples.csv.
    Simulate(RunArgs),
    /// Run a fleet experiment and write per-device, CDF and histogram files.
    Fleet(FleetArgs),
    /// Re-derive CDFs and histograms from a per-device CSV.
    Report {
        /// Per-device CSV written by `fleet`.
        devices_csv: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare two fleet summaries (summary.json files or output directories).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Print the comparison as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults apply to anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct FleetArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Invariant(_)) | Some(Error::TooManyInvalid { .. }) => 2,
        _ => 1,
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn simulate(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TestConfig::load(p)?,
        None => TestConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let report = uplat::run_latency_under_load(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write(&args.out.join("report.json"), &(report.to_json() + "\n"))?;
    write(&args.out.join("samples.csv"), &report.samples_csv())?;
    match report.stats {
        Some(s) => println!(
            "{} {}: mean {} ms, max {} ms, {} samples ({} censored), throughput {} bps",
            report.label,
            cfg.discipline,
            uplat::report::fmt_sig6(s.mean_ms),
            uplat::report::fmt_sig6(s.max_ms),
            report.sample_count,
            report.censored_count,
            uplat::report::fmt_sig6(report.achieved_throughput_bps),
        ),
        None => println!(
            "{} {}: invalid ({})",
            report.label,
            cfg.discipline,
            report.invalid_reason.as_deref().unwrap_or("unknown")
        ),
    }
    Ok(())
}

fn run_fleet(args: FleetArgs) -> anyhow::Result<()> {
    let run = args.run;
    let mut cfg = match &run.config {
        Some(p) => FleetConfig::load(p)?,
        None => FleetConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.master_seed = seed;
    }
    if run.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let population = fleet::sample_population(&cfg)?;
    let summary = fleet::run_fleet(&population, args.workers)?;
    fleet::emit_reports(&summary, Some(&cfg), &run.out)?;
    print_summary(&summary);
    Ok(())
}

fn print_summary(summary: &FleetSummary) {
    for v in &summary.variants {
        let means = summary.means(Some(v.discipline));
        let maxes = summary.maxes(Some(v.discipline));
        println!(
            "{}: {} devices, median mean {} ms, median max {} ms, [15,30) fraction {}",
            v.discipline,
            v.devices,
            uplat::report::fmt_sig6(uplat::report::median(&means).unwrap_or(0.0)),
            uplat::report::fmt_sig6(uplat::report::median(&maxes).unwrap_or(0.0)),
            uplat::report::fmt_sig6(v.band_fraction()),
        );
    }
    if !summary.invalid.is_empty() {
        println!("{} invalid device reports excluded", summary.invalid.len());
    }
}

fn load_summary(path: &Path) -> anyhow::Result<FleetSummary> {
    let file = if path.is_dir() { path.join(fleet::SUMMARY_JSON) } else { path.to_path_buf() };
    Ok(FleetSummary::load(&file)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Fleet(args) => run_fleet(args),
        Command::Report { devices_csv, out } => {
            let summary = fleet::summary_from_devices_csv(&devices_csv)?;
            fleet::emit_reports(&summary, None, &out)?;
            print_summary(&summary);
            Ok(())
        }
        Command::Compare { a, b, json } => {
            let sa = load_summary(&a).with_context(|| format!("loading {}", a.display()))?;
            let sb = load_summary(&b).with_context(|| format!("loading {}", b.display()))?;
            let cmp = fleet::compare(&sa, &sb)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&cmp)?);
            } else {
                print!("{}", cmp.to_table());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already embed their cause; skip repeated links
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
