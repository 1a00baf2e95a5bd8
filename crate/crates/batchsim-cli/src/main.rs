//! Command-line driver tying workload generation, simulation, scheduler
//! comparison sweeps, and window-similarity analysis into reproducible
//! experiments.

use anyhow::{anyhow, bail, Context, Result};
use batchsim::{
    analysis, engine, gen_uniform_workload, load_trace, metrics::MetricsReport, workload,
    ArrivalModel, ClientModel, PredictionConfig, RequestSpec, SchedulerPolicy, SimConfig,
    TraceColumns, WorkloadConfig,
};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Parser)]
#[command(
    name = "batchsim",
    about = "Simulate continuous-batching LLM serving under different request schedulers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload JSON file.
    GenWorkload(GenWorkloadArgs),
    /// Run one simulation and write metrics.json + events.jsonl.
    Simulate(SimulateArgs),
    /// Run a scheduler x clients x seeds sweep and write summary CSVs.
    Compare(CompareArgs),
    /// Compute the window similarity matrix of a length stream.
    AnalyzeTrace(AnalyzeArgs),
}

#[derive(Args, Clone)]
struct WorkloadSource {
    /// Workload JSON file produced by gen-workload.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Built-in preset: distribution-1 | distribution-2 | distribution-3 |
    /// sharegpt-o1-like.
    #[arg(long)]
    preset: Option<String>,
    /// Request count when generating from a preset.
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Workload generation seed (presets only).
    #[arg(long = "workload-seed", default_value_t = 0)]
    workload_seed: u64,
}

/// (input range, output range, max_new_tokens) for a preset.
type PresetRanges = ((u32, u32), (u32, u32), u32);

/// Input/output token ranges for the named preset. Ranges follow uniform
/// distributions; `sharegpt-o1-like` is a synthetic long-output stand-in,
/// not the real dataset.
fn preset_ranges(name: &str) -> Result<PresetRanges> {
    Ok(match name {
        "distribution-1" => ((32, 4096), (2048, 4096), 4096),
        "distribution-2" => ((3072, 5120), (3072, 5120), 5120),
        "distribution-3" => ((2048, 4096), (32, 4096), 4096),
        "sharegpt-o1-like" => ((32, 1024), (1024, 4096), 4096),
        other => {
            bail!("unknown preset {other:?} (expected distribution-1|2|3 or sharegpt-o1-like)")
        }
    })
}

impl WorkloadSource {
    fn load(&self) -> Result<(Vec<RequestSpec>, String)> {
        match (&self.workload, &self.preset) {
            (Some(path), None) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading workload {}", path.display()))?;
                let specs = workload::from_json(&text).context("parsing workload JSON")?;
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "workload".into());
                Ok((specs, name))
            }
            (None, Some(preset)) => {
                let (input_range, output_range, max_new_tokens) = preset_ranges(preset)?;
                let specs = gen_uniform_workload(&WorkloadConfig {
                    count: self.count,
                    input_range,
                    output_range,
                    max_new_tokens,
                    seed: self.workload_seed,
                    arrival: ArrivalModel::ClosedLoop { clients: 1 },
                })?;
                Ok((specs, preset.clone()))
            }
            _ => bail!("exactly one of --workload or --preset is required"),
        }
    }
}

#[derive(Args, Clone)]
struct SchedulerArgs {
    /// past-future | aggressive | conservative | oracle
    #[arg(long)]
    scheduler: String,
    /// Past-Future reserved capacity fraction.
    #[arg(long, default_value_t = 0.03)]
    reserved: f64,
    /// Aggressive admission watermark fraction.
    #[arg(long, default_value_t = 0.99)]
    watermark: f64,
    /// Conservative overcommit ratio (1.0 = no overcommit).
    #[arg(long, default_value_t = 1.0)]
    overcommit: f64,
    /// Past-Future history window size.
    #[arg(long, default_value_t = 1000)]
    window: usize,
    /// Past-Future sampling repetition constant.
    #[arg(long = "rep-constant", default_value_t = 64)]
    rep_constant: u32,
}

impl SchedulerArgs {
    fn policy(&self) -> Result<SchedulerPolicy> {
        build_policy(
            &self.scheduler,
            self.reserved,
            self.watermark,
            self.overcommit,
            self.window,
            self.rep_constant,
        )
    }
}

fn build_policy(
    name: &str,
    reserved: f64,
    watermark: f64,
    overcommit: f64,
    window: usize,
    rep_constant: u32,
) -> Result<SchedulerPolicy> {
    let policy = match name {
        "past-future" => SchedulerPolicy::PastFuture {
            reserved_ratio: reserved,
            prediction: PredictionConfig {
                window_size: window,
                repetition_constant: rep_constant,
                ..PredictionConfig::default()
            },
        },
        "aggressive" => SchedulerPolicy::Aggressive { watermark },
        "conservative" => SchedulerPolicy::Conservative {
            overcommit_ratio: overcommit,
        },
        "oracle" => SchedulerPolicy::Oracle,
        other => bail!(
            "unknown scheduler {other:?} (expected past-future|aggressive|conservative|oracle)"
        ),
    };
    policy.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(policy)
}

#[derive(Args, Clone)]
struct SimParams {
    /// KV pool capacity in tokens.
    #[arg(long, default_value_t = 16384)]
    capacity: u64,
    /// Engine RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TTFT SLA limit in seconds.
    #[arg(long = "ttft-limit", default_value_t = 10.0)]
    ttft_limit: f64,
    /// MTPOT SLA limit in seconds.
    #[arg(long = "mtpot-limit", default_value_t = 1.5)]
    mtpot_limit: f64,
    /// Sample the memory timeline every N iterations.
    #[arg(long = "sample-every", default_value_t = 1)]
    sample_every: u64,
    /// Run conservation checks every iteration.
    #[arg(long = "check-invariants", default_value_t = false)]
    check_invariants: bool,
}

impl SimParams {
    fn config(&self, seed: u64, clients: ClientModel) -> SimConfig {
        let mut cfg = SimConfig::new(self.capacity);
        cfg.seed = seed;
        cfg.sla.ttft_limit = self.ttft_limit;
        cfg.sla.mtpot_limit = self.mtpot_limit;
        cfg.sample_every = self.sample_every;
        cfg.check_invariants = self.check_invariants;
        cfg.clients = clients;
        cfg
    }
}

#[derive(Args)]
struct GenWorkloadArgs {
    #[arg(long)]
    count: Option<usize>,
    /// Input token range as MIN:MAX.
    #[arg(long)]
    input: Option<String>,
    /// Output token range as MIN:MAX.
    #[arg(long)]
    output: Option<String>,
    /// Cap on output length.
    #[arg(long = "max-new")]
    max_new: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Preset overriding the ranges: distribution-1|2|3, sharegpt-o1-like.
    #[arg(long)]
    preset: Option<String>,
    /// Open-loop Poisson arrival rate (requests/second); omit for
    /// closed-loop workloads with arrival_time = 0.
    #[arg(long)]
    rate: Option<f64>,
    /// Output file (JSON array of request specs).
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> Result<(u32, u32)> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("range must be MIN:MAX, got {s:?}"))?;
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn cmd_gen_workload(args: GenWorkloadArgs) -> Result<()> {
    let (input_range, output_range, max_new_tokens) = match &args.preset {
        Some(preset) => preset_ranges(preset)?,
        None => {
            let input = args
                .input
                .as_deref()
                .ok_or_else(|| anyhow!("--input MIN:MAX is required without --preset"))?;
            let output = args
                .output
                .as_deref()
                .ok_or_else(|| anyhow!("--output MIN:MAX is required without --preset"))?;
            let output_range = parse_range(output)?;
            (
                parse_range(input)?,
                output_range,
                args.max_new.unwrap_or(output_range.1),
            )
        }
    };
    let count = args.count.ok_or_else(|| anyhow!("--count is required"))?;
    let cfg = WorkloadConfig {
        count,
        input_range,
        output_range,
        max_new_tokens,
        seed: args.seed,
        arrival: match args.rate {
            Some(rate) => ArrivalModel::OpenLoop { rate },
            None => ArrivalModel::ClosedLoop { clients: 1 },
        },
    };
    let specs = gen_uniform_workload(&cfg)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, workload::to_json(&specs))?;
    let n = specs.len().max(1) as f64;
    let mean_in = specs.iter().map(|s| f64::from(s.input_len)).sum::<f64>() / n;
    let mean_out = specs
        .iter()
        .map(|s| f64::from(s.true_output_len))
        .sum::<f64>()
        / n;
    println!(
        "wrote {} requests to {} (mean input {:.1}, mean output {:.1})",
        specs.len(),
        args.out.display(),
        mean_in,
        mean_out
    );
    Ok(())
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: WorkloadSource,
    #[command(flatten)]
    scheduler: SchedulerArgs,
    #[command(flatten)]
    sim: SimParams,
    /// Closed-loop client count.
    #[arg(long, default_value_t = 16)]
    clients: usize,
    /// Replay workload arrival times instead of closed-loop clients.
    #[arg(long = "open-loop", default_value_t = false)]
    open_loop: bool,
    /// Output directory for metrics.json and events.jsonl.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let (specs, _) = args.source.load()?;
    let policy = args.scheduler.policy()?;
    let clients = if args.open_loop {
        ClientModel::OpenLoop
    } else {
        ClientModel::ClosedLoop {
            clients: args.clients,
        }
    };
    let cfg = args.sim.config(args.sim.seed, clients);
    let out = engine::run(&specs, &policy, &cfg)?;
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&out.report)?,
    )?;
    fs::write(args.out.join("events.jsonl"), out.log.to_jsonl())?;
    let r = &out.report;
    println!(
        "scheduler={} goodput={:.1} tok/s throughput={:.1} tok/s decoding_steps={} evicted_reqs={:.2}% consumed={:.2}%",
        policy.name(),
        r.goodput,
        r.throughput,
        r.decoding_steps,
        r.evicted_reqs_pct * 100.0,
        r.avg_consumed_pct * 100.0,
    );
    Ok(())
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    source: WorkloadSource,
    /// Comma list of scheduler specs, e.g.
    /// "oracle,past-future:0.03,aggressive:0.99,conservative:1.5".
    #[arg(
        long,
        default_value = "oracle,past-future:0.03,aggressive:0.99,conservative:1.0"
    )]
    schedulers: String,
    /// Comma list of closed-loop client counts.
    #[arg(long, default_value = "16")]
    clients: String,
    /// Comma list of engine seeds.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[command(flatten)]
    sim: SimParams,
    /// Parallel simulations.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_scheduler_spec(spec: &str, sim: &SimParams) -> Result<(String, String, SchedulerPolicy)> {
    let (name, param) = match spec.split_once(':') {
        Some((n, p)) => (n.trim(), Some(p.trim())),
        None => (spec.trim(), None),
    };
    let parse = |p: Option<&str>, default: f64| -> Result<f64> {
        Ok(match p {
            Some(v) => v.parse()?,
            None => default,
        })
    };
    let policy = match name {
        "past-future" => build_policy(name, parse(param, 0.03)?, 0.0, 1.0, 1000, 64)?,
        "aggressive" => build_policy(name, 0.0, parse(param, 0.99)?, 1.0, 1000, 64)?,
        "conservative" => build_policy(name, 0.0, 0.0, parse(param, 1.0)?, 1000, 64)?,
        "oracle" => SchedulerPolicy::Oracle,
        other => bail!("unknown scheduler {other:?} in --schedulers"),
    };
    let _ = sim;
    let tag = match param {
        Some(p) => format!("{name}-{p}"),
        None => name.to_string(),
    };
    Ok((tag, policy.param_string(), policy))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|e| anyhow!("invalid {what} entry {x:?}: {e}"))
        })
        .collect()
}

struct Cell {
    tag: String,
    params: String,
    policy: SchedulerPolicy,
    clients: usize,
    seed: u64,
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let (specs, dataset) = args.source.load()?;
    let client_counts: Vec<usize> = parse_list(&args.clients, "clients")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seeds")?;
    let mut cells = Vec::new();
    for sched_spec in args.schedulers.split(',') {
        // Scheduler specs contain one ':' at most, so commas separate specs.
        let (tag, params, policy) = parse_scheduler_spec(sched_spec, &args.sim)?;
        for &clients in &client_counts {
            for &seed in &seeds {
                cells.push(Cell {
                    tag: tag.clone(),
                    params: params.clone(),
                    policy: policy.clone(),
                    clients,
                    seed,
                });
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricsReport, String>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let jobs = args.jobs.max(1).min(cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= cells.len() {
                    break;
                }
                let cell = &cells[idx];
                let cfg = args.sim.config(
                    cell.seed,
                    ClientModel::ClosedLoop {
                        clients: cell.clients,
                    },
                );
                let outcome = engine::run(&specs, &cell.policy, &cfg)
                    .map(|o| o.report)
                    .map_err(|e| e.to_string());
                results.lock().expect("no panics hold the lock")[idx] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("threads joined");

    fs::create_dir_all(&args.out)?;
    let mut summary = String::from(MetricsReport::SUMMARY_CSV_HEADER);
    summary.push('\n');
    let mut failures = Vec::new();
    for (cell, result) in cells.iter().zip(&results) {
        match result.as_ref().expect("every cell ran") {
            Ok(report) => {
                summary.push_str(&report.summary_csv_row(
                    cell.policy.name(),
                    &cell.params,
                    &dataset,
                    cell.clients,
                    cell.seed,
                ));
                summary.push('\n');
            }
            Err(msg) => failures.push(format!(
                "{} clients={} seed={}: {msg}",
                cell.tag, cell.clients, cell.seed
            )),
        }
    }
    fs::write(args.out.join("summary.csv"), &summary)?;

    // One goodput-vs-clients curve per scheduler tag, averaged over seeds.
    let mut tags: Vec<&String> = cells.iter().map(|c| &c.tag).collect();
    tags.dedup();
    let mut seen = std::collections::BTreeSet::new();
    for tag in tags {
        if !seen.insert(tag.clone()) {
            continue;
        }
        let mut csv = String::from("clients,seed,goodput,throughput\n");
        for (cell, result) in cells.iter().zip(&results) {
            if &cell.tag != tag {
                continue;
            }
            if let Some(Ok(report)) = result.as_ref() {
                csv.push_str(&format!(
                    "{},{},{:.6},{:.6}\n",
                    cell.clients, cell.seed, report.goodput, report.throughput
                ));
            }
        }
        fs::write(args.out.join(format!("goodput_vs_clients_{tag}.csv")), csv)?;
    }

    println!(
        "compare: {} cells, {} failed, summary at {}",
        cells.len(),
        failures.len(),
        args.out.join("summary.csv").display()
    );
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("cell failed: {f}");
        }
        bail!("{} of {} cells failed", failures.len(), cells.len());
    }
    Ok(())
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Workload JSON whose true output lengths form the stream.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// CSV trace with a header row.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output-tokens column name for --trace.
    #[arg(long = "col-output", default_value = "output_tokens")]
    col_output: String,
    /// Input-tokens column name for --trace.
    #[arg(long = "col-input", default_value = "input_tokens")]
    col_input: String,
    /// Cap applied to trace outputs.
    #[arg(long = "max-new", default_value_t = 2048)]
    max_new: u32,
    /// Requests per similarity window.
    #[arg(long, default_value_t = 1000)]
    window: usize,
    /// Histogram bin width in tokens.
    #[arg(long = "bin-width", default_value_t = 1)]
    bin_width: u32,
    /// Output directory for similarity.csv and summary.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn cmd_analyze_trace(args: AnalyzeArgs) -> Result<()> {
    let lengths: Vec<u32> = match (&args.workload, &args.trace) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)?;
            workload::from_json(&text)?
                .iter()
                .map(|s| s.true_output_len)
                .collect()
        }
        (None, Some(path)) => {
            let columns = TraceColumns {
                input_tokens: args.col_input.clone(),
                output_tokens: args.col_output.clone(),
                timestamp: None,
            };
            let (specs, summary) = load_trace(path, &columns, args.max_new)?;
            if summary.skipped_zero + summary.skipped_unparsable > 0 {
                eprintln!(
                    "skipped {} zero-length and {} unparsable rows",
                    summary.skipped_zero, summary.skipped_unparsable
                );
            }
            specs.iter().map(|s| s.true_output_len).collect()
        }
        _ => bail!("exactly one of --workload or --trace is required"),
    };
    let matrix = analysis::window_similarity_matrix_binned(&lengths, args.window, args.bin_width)?;
    let summary = analysis::adjacency_summary(&matrix)?;
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("similarity.csv"),
        analysis::matrix_to_csv(&matrix),
    )?;
    let report = analysis::SimilarityReport {
        window: args.window,
        num_windows: matrix.len(),
        mean_adjacent: summary.mean_adjacent,
        mean_global: summary.mean_global,
    };
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{} windows of {}: mean_adjacent={:.4} mean_global={:.4}",
        matrix.len(),
        args.window,
        summary.mean_adjacent,
        summary.mean_global
    );
    Ok(())
}

fn run_command(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorkload(args) => cmd_gen_workload(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::AnalyzeTrace(args) => cmd_analyze_trace(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run_command(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
