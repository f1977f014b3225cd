//! Command-line driver: trace generation, single simulation runs, parameter
//! sweeps, and policy comparisons.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. All randomness
//! flows from explicit seeds; re-running a command reproduces its output
//! byte for byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pagedkv::config::{AllocatorKind, EngineConfig, PreemptionPolicy};
use pagedkv::simulator::{
    run_simulation, sweep, write_sweep_csv, SimMetrics, SweepParam,
};
use pagedkv::workload::{
    generate_trace, read_trace, write_trace, DecodingMix, Profile, TraceGenConfig, TraceRecord,
};

#[derive(Parser)]
#[command(
    name = "pagedkv",
    about = "Paged KV cache serving simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic request trace (JSON lines).
    GenerateTrace(GenerateTraceArgs),
    /// Replay a trace through the serving engine and write metrics.
    Simulate(SimulateArgs),
    /// Run one trace under several values of one parameter.
    Sweep(SweepArgs),
    /// Shorthand for a swap-vs-recompute policy sweep.
    ComparePolicies(ComparePoliciesArgs),
}

#[derive(Args)]
struct GenerateTraceArgs {
    /// Mean request rate, requests per second.
    #[arg(long)]
    rate: f64,
    /// Trace duration in (virtual) seconds.
    #[arg(long)]
    duration: f64,
    /// Length profile: short | long.
    #[arg(long, default_value = "short")]
    profile: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the JSON-lines trace.
    #[arg(long)]
    out: PathBuf,
    /// Weight of greedy requests in the mix.
    #[arg(long, default_value_t = 1.0)]
    greedy_weight: f64,
    /// Weight of parallel-sampling requests.
    #[arg(long, default_value_t = 0.0)]
    sample_weight: f64,
    /// Weight of beam-search requests.
    #[arg(long, default_value_t = 0.0)]
    beam_weight: f64,
    /// Samples per parallel-sampling request.
    #[arg(long, default_value_t = 2)]
    sample_n: usize,
    /// Beam width for beam requests.
    #[arg(long, default_value_t = 2)]
    beam_k: usize,
    /// Sampling temperature.
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    /// Model window used to clip lengths.
    #[arg(long, default_value_t = 2048)]
    max_seq_len: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// Input trace (JSON lines).
    #[arg(long)]
    trace: PathBuf,
    /// Engine config file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the allocator: paged | oracle | pow2 | max.
    #[arg(long)]
    allocator: Option<String>,
    /// Override the preemption policy: swap | recompute.
    #[arg(long)]
    policy: Option<String>,
    /// Override the block size.
    #[arg(long)]
    block_size: Option<usize>,
    /// Disable block sharing (fork copies physically).
    #[arg(long)]
    no_sharing: bool,
    /// Register a shared prompt prefix of this many tokens.
    #[arg(long)]
    shared_prefix_len: Option<usize>,
    /// JSON summary output path.
    #[arg(long)]
    out_metrics: PathBuf,
    /// Also write a per-iteration CSV next to the summary.
    #[arg(long)]
    per_tick_csv: Option<PathBuf>,
    /// Write scheduling decisions (admit/resume/preempt/finish/reject)
    /// as JSON lines.
    #[arg(long)]
    events_out: Option<PathBuf>,
    /// Dump the final block-manager state as JSON (paged allocator only).
    #[arg(long)]
    dump_state: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Parameter to sweep: block_size | request_rate | allocator | policy.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long)]
    values: String,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tidy CSV output (one row per value and metric).
    #[arg(long)]
    out: PathBuf,
    /// Run up to N sweep configurations concurrently (they share nothing).
    #[arg(long, default_value_t = 1)]
    parallel_sweeps: usize,
}

#[derive(Args)]
struct ComparePoliciesArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preempt the latest running group every N iterations to expose the
    /// recovery cost even without memory pressure.
    #[arg(long)]
    force_preempt_every: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    /// Bad flags or flag values: exit code 2, like clap's own errors.
    Usage(String),
    /// Failures while doing the work: exit code 1.
    Runtime(String),
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateTrace(args) => generate_trace_cmd(args),
        Command::Simulate(args) => simulate_cmd(args),
        Command::Sweep(args) => sweep_cmd(args),
        Command::ComparePolicies(args) => compare_policies_cmd(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<EngineConfig, CliError> {
    let Some(path) = path else {
        return Ok(EngineConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: EngineConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("bad config: {e}")))?;
    cfg.validate().map_err(CliError::Runtime)?;
    Ok(cfg)
}

fn generate_trace_cmd(args: GenerateTraceArgs) -> Result<(), CliError> {
    let profile = Profile::parse(&args.profile).or_else(usage)?;
    if args.rate <= 0.0 {
        return usage("rate must be positive");
    }
    let cfg = TraceGenConfig {
        rate: args.rate,
        duration: args.duration,
        dist: profile.distribution(),
        mix: DecodingMix {
            greedy_weight: args.greedy_weight,
            sample_weight: args.sample_weight,
            beam_weight: args.beam_weight,
            sample_n: args.sample_n,
            temperature: args.temperature,
            beam_k: args.beam_k,
        },
        max_seq_len: args.max_seq_len,
        seed: args.seed,
    };
    let records = generate_trace(&cfg);
    write_trace(&records, &args.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut EngineConfig, args: &SimulateArgs) -> Result<(), CliError> {
    if let Some(a) = &args.allocator {
        cfg.allocator = AllocatorKind::parse(a).or_else(usage)?;
    }
    if let Some(p) = &args.policy {
        cfg.policy = PreemptionPolicy::parse(p).or_else(usage)?;
    }
    if let Some(b) = args.block_size {
        if b == 0 {
            return usage("block size must be >= 1");
        }
        *cfg = cfg.with_block_size_same_capacity(b);
    }
    if args.no_sharing {
        cfg.sharing = false;
    }
    if let Some(n) = args.shared_prefix_len {
        cfg.shared_prefix_len = n;
    }
    cfg.validate().map_err(CliError::Runtime)
}

fn load_trace(path: &Path, cfg: &EngineConfig) -> Result<Vec<TraceRecord>, CliError> {
    read_trace(path, cfg.model.max_seq_len)
        .map_err(|e| CliError::Runtime(format!("trace {}: {e}", path.display())))
}

fn simulate_cmd(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, &args)?;
    let trace = load_trace(&args.trace, &cfg)?;
    let metrics = run_simulation(&trace, &cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    metrics
        .write_summary_json(&args.out_metrics)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(csv) = &args.per_tick_csv {
        metrics
            .write_ticks_csv(csv)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    if let Some(events) = &args.events_out {
        metrics
            .write_events_jsonl(events)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    if let Some(dump) = &args.dump_state {
        if cfg.allocator == AllocatorKind::Paged {
            // Re-run to capture the final manager state; the engine is
            // deterministic so this reproduces the run exactly.
            let mut engine = pagedkv::Engine::new(cfg.clone());
            for r in &trace {
                let prompt = pagedkv::simulator::prompt_for_record(&cfg, r);
                let _ = engine.submit(r.arrival_time, prompt, r.decoding, r.seed);
            }
            while engine.has_pending() {
                engine.step().map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            std::fs::write(
                dump,
                serde_json::to_string_pretty(&engine.manager().debug_dump())
                    .map_err(|e| CliError::Runtime(e.to_string()))?
                    + "\n",
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        } else {
            return usage("--dump-state requires the paged allocator");
        }
    }
    print_summary(&metrics);
    Ok(())
}

fn print_summary(metrics: &SimMetrics) {
    println!(
        "allocator={} policy={} block_size={} requests={} rejected={} \
         mean_normalized_latency={:.6} token_fraction={:.4} tokens={}",
        metrics.allocator.label(),
        metrics.policy.label(),
        metrics.block_size,
        metrics.requests.len(),
        metrics.num_rejected(),
        metrics.mean_normalized_latency(),
        metrics.time_avg_token_fraction(),
        metrics.tokens_generated(),
    );
}

fn sweep_cmd(args: SweepArgs) -> Result<(), CliError> {
    let param = SweepParam::parse(&args.param).or_else(usage)?;
    let values: Vec<String> = args
        .values
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return usage("--values must list at least one value");
    }
    let cfg = load_config(&args.config)?;
    let trace = load_trace(&args.trace, &cfg)?;
    let rows = if args.parallel_sweeps > 1 {
        run_sweep_parallel(param, &values, &trace, &cfg, args.parallel_sweeps)?
    } else {
        sweep(param, &values, &trace, &cfg).map_err(|e| CliError::Runtime(e.to_string()))?
    };
    write_sweep_csv(param, &rows, &args.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in &rows {
        println!(
            "{}={} mean_normalized_latency={:.6} token_fraction={:.4}",
            param.label(),
            row.value,
            row.metrics.mean_normalized_latency(),
            row.metrics.time_avg_token_fraction(),
        );
    }
    Ok(())
}

/// Each sweep value is an independent run; fan them out over worker
/// threads and reassemble in value order.
fn run_sweep_parallel(
    param: SweepParam,
    values: &[String],
    trace: &[TraceRecord],
    cfg: &EngineConfig,
    workers: usize,
) -> Result<Vec<pagedkv::simulator::SweepRow>, CliError> {
    let mut slots: Vec<Option<pagedkv::simulator::SweepRow>> =
        (0..values.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<(usize, Result<pagedkv::simulator::SweepRow, String>)> =
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for _ in 0..workers.max(1).min(values.len()) {
                handles.push(scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if i >= values.len() {
                            break done;
                        }
                        let one = std::slice::from_ref(&values[i]);
                        let row = sweep(param, one, trace, cfg)
                            .map(|mut rows| rows.pop().expect("one value, one row"))
                            .map_err(|e| e.to_string());
                        done.push((i, row));
                    }
                }));
            }
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
    for (i, row) in results {
        slots[i] = Some(row.map_err(CliError::Runtime)?);
    }
    Ok(slots.into_iter().map(|r| r.unwrap()).collect())
}

fn compare_policies_cmd(args: ComparePoliciesArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(k) = args.force_preempt_every {
        cfg.force_preempt_every = Some(k);
    }
    let trace = load_trace(&args.trace, &cfg)?;
    let values = vec!["swap".to_string(), "recompute".to_string()];
    let rows = sweep(SweepParam::Policy, &values, &trace, &cfg)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_sweep_csv(SweepParam::Policy, &rows, &args.out)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in &rows {
        println!(
            "policy={} mean_normalized_latency={:.6} swap_bytes={} recompute_tokens={}",
            row.value,
            row.metrics.mean_normalized_latency(),
            row.metrics.total_swap_bytes(),
            row.metrics.total_recompute_tokens(),
        );
    }
    Ok(())
}
