//! Command-line front end: generate synthetic traces, replay them under a
//! policy, sweep policy/capacity/threshold grids, certify the clairvoyant
//! policy against the exhaustive oracle, and run Monte-Carlo policy
//! comparisons.
//!
//! All configuration lives in one JSON file per subcommand, with flag
//! overrides for the common knobs. Assertion-style subcommands exit nonzero
//! on failure.

mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tailsim_core::oracle::InstanceBounds;
use tailsim_core::policy::PolicyFamily;
use tailsim_core::sim::{
    compare, monte_carlo_policy_test, oracle_check, replay, write_comparison_csv,
    write_improvement_csv, write_records_csv, ComparisonTable, McConfig, ReportSpec, RunConfig,
};
use tailsim_core::workload::{fit_prompt_distribution, generate_synthetic, SyntheticParams};

#[derive(Parser)]
#[command(
    name = "tailsim",
    version,
    about = "Trace-driven KV-cache eviction simulator for tail-latency analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic conversation trace.
    Generate(GenerateArgs),
    /// Replay one trace under one policy; write records CSV + report JSON.
    Replay(ReplayArgs),
    /// Replay a policy/capacity/threshold grid; write table CSV/JSON and
    /// optional SVG charts.
    Compare(CompareArgs),
    /// Certify the clairvoyant policy against the exhaustive optimum on
    /// random micro-instances. Exits nonzero on any mismatch.
    OracleCheck(OracleCheckArgs),
    /// Paired Monte-Carlo policy comparison on the synthetic workload.
    /// Exits nonzero when the reference policy loses to any comparator.
    McTest(McTestArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Synthetic model parameters (JSON). Omit to use a preset.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Built-in parameter preset: "sharegpt" (mean prompt 100 blocks) or
    /// "wildchat" (mean prompt 200 blocks).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Output trace file (newline-delimited JSON).
    #[arg(long, short = 'o')]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_events: Option<usize>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Run configuration (JSON): trace source, policies, capacities,
    /// thresholds, latency model, SLOs.
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Trace file overriding the config's trace source.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Which configured policy to replay.
    #[arg(long, default_value_t = 0)]
    policy_index: usize,
    /// Capacity override (defaults to the config's first capacity).
    #[arg(long)]
    capacity: Option<u64>,
    /// Latency threshold override in ms (defaults to the config's first).
    #[arg(long)]
    xi_ms: Option<f64>,
    /// Output directory (default: the config's output_dir, then "out").
    #[arg(long, short = 'o')]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Output directory (default: the config's output_dir, then "out").
    #[arg(long, short = 'o')]
    out_dir: Option<PathBuf>,
    /// Also write one SVG chart of latency vs capacity per threshold.
    #[arg(long)]
    svg: bool,
    /// Replace each policy's next-prompt estimate with the trace's
    /// empirical mean prompt length.
    #[arg(long)]
    q_hat_from_trace: bool,
}

#[derive(Args)]
struct OracleCheckArgs {
    /// Solve one instance file (JSON) instead of running random checks;
    /// emits the solution with its full cache schedule.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Solve under forced caching (with --instance).
    #[arg(long)]
    forced: bool,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    max_conversations: usize,
    #[arg(long, default_value_t = 6)]
    max_steps: usize,
    #[arg(long, default_value_t = 8)]
    max_capacity: u64,
    #[arg(long, default_value_t = 4)]
    max_turn_blocks: u64,
    #[arg(long, default_value_t = 4)]
    max_xi: u64,
    /// Write the full report as JSON.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McTestArgs {
    /// Monte-Carlo configuration (JSON): synthetic parameters, policies
    /// (first is the reference), capacity, threshold, runs.
    #[arg(long, short = 'c')]
    config: PathBuf,
    #[arg(long)]
    runs: Option<usize>,
    /// Report only; do not fail when the reference policy loses.
    #[arg(long)]
    no_assert: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(args) => run_generate(args),
        Command::Replay(args) => run_replay(args),
        Command::Compare(args) => run_compare(args),
        Command::OracleCheck(args) => run_oracle_check(args),
        Command::McTest(args) => run_mc_test(args),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_out_dir(flag: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let mut params: SyntheticParams = match (&args.config, args.preset.as_deref()) {
        (Some(path), _) => load_json(path)?,
        (None, Some("sharegpt")) => SyntheticParams::sharegpt_preset(2000, 0),
        (None, Some("wildchat")) => SyntheticParams::wildchat_like_preset(2000, 0),
        (None, Some(other)) => bail!("unknown preset '{other}' (try sharegpt or wildchat)"),
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    if let Some(max_events) = args.max_events {
        params.max_events = max_events;
    }
    let trace = generate_synthetic(&params)?;
    let mut file = fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    trace.write_ndjson(&mut file)?;
    eprintln!(
        "wrote {} turns / {} conversations to {}",
        trace.horizon(),
        trace.conversation_count(),
        args.out.display()
    );
    Ok(())
}

fn run_replay(args: ReplayArgs) -> Result<()> {
    let mut config: RunConfig = load_json(&args.config)?;
    if let Some(trace) = &args.trace {
        config.trace = tailsim_core::sim::TraceSource::File {
            path: trace.display().to_string(),
        };
    }
    config.validate()?;
    let policy = config
        .policies
        .get(args.policy_index)
        .with_context(|| format!("policy index {} out of range", args.policy_index))?;
    let capacity = args.capacity.unwrap_or(config.capacities[0]);
    let xi_s_ms = args.xi_ms.unwrap_or(config.xi_ms[0]);
    let xi_blocks = config.latency.ms_to_blocks(xi_s_ms);
    let policy = policy.clone().with_xi_blocks(xi_blocks);

    let trace = config.load_trace()?;
    let spec = ReportSpec {
        xi_s_ms,
        slo_ms: config.slo_ms.clone(),
    };
    let outcome = replay(&trace, &policy, capacity, &config.latency, &spec)?;

    let out_dir = resolve_out_dir(args.out_dir, &config);
    fs::create_dir_all(&out_dir)?;
    let records_path = out_dir.join("records.csv");
    let mut records_file = fs::File::create(&records_path)?;
    write_records_csv(&outcome.records, &mut records_file)?;
    let report_path = out_dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&outcome.report)?)?;

    eprintln!(
        "replayed {} requests under {} at capacity {capacity}: p90 {:.1} ms, tel {:.1} ms",
        outcome.report.count,
        policy.label(),
        outcome.report.p90_ms,
        outcome.report.tel_ms
    );
    eprintln!("wrote {} and {}", records_path.display(), report_path.display());
    Ok(())
}

fn run_compare(args: CompareArgs) -> Result<()> {
    let mut config: RunConfig = load_json(&args.config)?;
    if args.q_hat_from_trace {
        let trace = config.load_trace()?;
        let q_hat = fit_prompt_distribution(&trace)?.mean().round() as u64;
        for policy in &mut config.policies {
            match &mut policy.family {
                PolicyFamily::Tlru(p) | PolicyFamily::EndAwareTlru(p) => p.q_hat_blocks = q_hat,
                _ => {}
            }
        }
        eprintln!("using empirical next-prompt estimate {q_hat} blocks");
    }
    let table = compare(&config)?;

    let out_dir = resolve_out_dir(args.out_dir, &config);
    fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("comparison.csv");
    write_comparison_csv(&table, fs::File::create(&csv_path)?)?;
    let improvements_path = out_dir.join("improvements.csv");
    write_improvement_csv(&table, fs::File::create(&improvements_path)?)?;
    let json_path = out_dir.join("comparison.json");
    fs::write(&json_path, serde_json::to_string_pretty(&table)?)?;
    eprintln!(
        "wrote {}, {}, {}",
        csv_path.display(),
        improvements_path.display(),
        json_path.display()
    );

    if args.svg {
        for xi_s in &config.xi_ms {
            let path = out_dir.join(format!("sweep_xi{xi_s:.0}ms.svg"));
            fs::write(&path, sweep_svg(&table, &config, *xi_s))?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

type PercentileExtractor = fn(&tailsim_core::metrics::MetricsReport) -> f64;

fn sweep_svg(table: &ComparisonTable, config: &RunConfig, xi_s: f64) -> String {
    let percentiles: [(&str, PercentileExtractor); 4] = [
        ("p50", |r| r.p50_ms),
        ("p90", |r| r.p90_ms),
        ("p95", |r| r.p95_ms),
        ("p99", |r| r.p99_ms),
    ];
    let panels: Vec<(&str, Vec<svg::Series>)> = percentiles
        .iter()
        .map(|(name, extract)| {
            let series = config
                .policies
                .iter()
                .map(|policy| {
                    let label = policy.label();
                    let points = config
                        .capacities
                        .iter()
                        .filter_map(|&capacity| {
                            table
                                .cell(&label, capacity, xi_s)
                                .map(|cell| (capacity as f64, extract(&cell.report)))
                        })
                        .collect();
                    svg::Series { label, points }
                })
                .collect();
            (*name, series)
        })
        .collect();
    svg::sweep_chart(
        &format!("latency threshold {xi_s:.0} ms"),
        &panels,
    )
}

fn run_oracle_check(args: OracleCheckArgs) -> Result<()> {
    if let Some(instance_path) = &args.instance {
        let instance: tailsim_core::oracle::HindsightInstance = load_json(instance_path)?;
        let mode = if args.forced {
            tailsim_core::policy::CachingMode::Forced
        } else {
            tailsim_core::policy::CachingMode::Optional
        };
        let solution = tailsim_core::oracle::solve_hindsight_tel(&instance, mode)?;
        let rendered = serde_json::to_string_pretty(&solution)?;
        match &args.out {
            Some(out) => {
                fs::write(out, &rendered)?;
                eprintln!("optimal TEL {} blocks; wrote {}", solution.optimal_tel_blocks, out.display());
            }
            None => println!("{rendered}"),
        }
        return Ok(());
    }

    let bounds = InstanceBounds {
        max_conversations: args.max_conversations,
        max_steps: args.max_steps,
        max_capacity: args.max_capacity,
        max_turn_blocks: args.max_turn_blocks,
        max_xi_blocks: args.max_xi,
    };
    let report = oracle_check(args.count, &bounds, args.seed)?;
    println!(
        "checked {} instances ({} also in forced mode): {} mismatches",
        report.instances_run,
        report.forced_instances_run,
        report.mismatches.len()
    );
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
        eprintln!("wrote {}", out.display());
    }
    if !report.passed() {
        for mismatch in &report.mismatches {
            println!(
                "MISMATCH ({:?}): replay {} vs optimum {} on {:?}",
                mismatch.mode,
                mismatch.replay_tel_blocks,
                mismatch.oracle_tel_blocks,
                mismatch.instance
            );
        }
        bail!("{} mismatches found", report.mismatches.len());
    }
    Ok(())
}

fn run_mc_test(args: McTestArgs) -> Result<()> {
    let mut config: McConfig = load_json(&args.config)?;
    if let Some(runs) = args.runs {
        config.runs = runs;
    }
    let report = monte_carlo_policy_test(&config)?;
    println!("reference: {} over {} paired seeds", report.reference, report.runs);
    for (label, mean) in &report.mean_tel_blocks {
        println!("  mean TEL {label}: {mean:.2} blocks");
    }
    let mut failed = Vec::new();
    for paired in &report.paired {
        println!(
            "  vs {}: mean diff {:.2}, 95% ci [{:.2}, {:.2}] -> {}",
            paired.comparator,
            paired.mean_diff_blocks,
            paired.ci95_lower,
            paired.ci95_upper,
            if paired.reference_no_worse() { "ok" } else { "WORSE" }
        );
        if !paired.reference_no_worse() {
            failed.push(paired.comparator.clone());
        }
    }
    if !args.no_assert && !failed.is_empty() {
        bail!("reference policy lost to: {}", failed.join(", "));
    }
    Ok(())
}
