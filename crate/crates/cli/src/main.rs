use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use corec::harness::{
    compare, line_rate_pps, run, validate_invariants, write_compare_csv, ArrivalProcess, ClockMode, CompareRow,
    ExperimentConfig, InvariantCheck, Mode, RunResult, ServiceMode, SizeMix, StallPlan,
};
use corec::metrics::reorder_analyze;
use corec::queueing::{sweep, write_sweep_csv, QueueModel, ServiceModel, Topology};
use corec::{HookPoint, Mutation};

#[derive(Parser)]
#[command(
    name = "corec",
    version,
    about = "Multi-consumer receive experiments on an emulated NIC ring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and report throughput, latency and reordering.
    Run(RunArgs),
    /// Run several experiments with shared seeds and emit a CSV table.
    Compare(CompareArgs),
    /// Scale-up vs scale-out queueing simulation.
    QueueingSweep(SweepArgs),
    /// Reordering versus packet size, or analysis of a recorded order.
    ReorderTest(ReorderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

/// Parses a kebab-case name through the type's serde representation.
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Experiment fields settable from the command line. Anything given here
/// overrides the config file.
#[derive(Args, Clone, Default)]
struct ExperimentArgs {
    /// TOML file with experiment fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = kebab::<Mode>)]
    mode: Option<Mode>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    ring_size: Option<u32>,
    #[arg(long)]
    batch_size: Option<u32>,
    #[arg(long)]
    pool_capacity: Option<usize>,
    /// poisson, constant or saturate
    #[arg(long, value_parser = kebab::<ArrivalProcess>)]
    arrival: Option<ArrivalProcess>,
    #[arg(long)]
    rate_pps: Option<f64>,
    /// Fixed packet size in bytes.
    #[arg(long, conflicts_with = "size_mix")]
    size: Option<u32>,
    /// Heavy-tailed size mix as MIN:MAX:SHAPE.
    #[arg(long, value_parser = parse_mix)]
    size_mix: Option<SizeMix>,
    #[arg(long)]
    flows: Option<u32>,
    #[arg(long)]
    service_base_ns: Option<f64>,
    #[arg(long)]
    service_per_byte_ns: Option<f64>,
    /// spin or hold
    #[arg(long, value_parser = kebab::<ServiceMode>)]
    service_mode: Option<ServiceMode>,
    #[arg(long)]
    packets: Option<u64>,
    /// simulated or wall-clock
    #[arg(long, value_parser = kebab::<ClockMode>)]
    clock: Option<ClockMode>,
    #[arg(long)]
    poll_cost_ns: Option<u64>,
    /// Consumer to park at the stall point.
    #[arg(long)]
    stall_thread: Option<usize>,
    /// after-claim or after-copy
    #[arg(long, value_parser = kebab::<HookPoint>, requires = "stall_thread")]
    stall_point: Option<HookPoint>,
    #[arg(long, requires = "stall_thread")]
    stall_occurrence: Option<u64>,
    /// Park duration; the thread stays parked until shutdown if omitted.
    #[arg(long, requires = "stall_thread")]
    stall_ms: Option<u64>,
    #[arg(long)]
    jitter: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Deliberately broken receive path, for checking the validators.
    #[arg(long, value_parser = kebab::<Mutation>)]
    mutation: Option<Mutation>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    idle_ms: Option<u64>,
}

fn parse_mix(s: &str) -> Result<SizeMix, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [min, max, shape] = parts[..] else {
        return Err("expected MIN:MAX:SHAPE".into());
    };
    Ok(SizeMix::Mixed {
        min: min.parse().map_err(|e| format!("{e}"))?,
        max: max.parse().map_err(|e| format!("{e}"))?,
        shape: shape.parse().map_err(|e| format!("{e}"))?,
    })
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl ExperimentArgs {
    fn base(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => read_toml(p),
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn apply(&self, c: &mut ExperimentConfig) {
        macro_rules! set {
            ($($f:ident => $dst:expr),* $(,)?) => {$(
                if let Some(v) = self.$f { $dst = v; }
            )*};
        }
        set! {
            mode => c.mode,
            threads => c.threads,
            ring_size => c.ring_size,
            batch_size => c.batch_size,
            arrival => c.arrival,
            rate_pps => c.rate_pps,
            size_mix => c.sizes,
            flows => c.flows,
            service_base_ns => c.service.base_ns,
            service_per_byte_ns => c.service.per_byte_ns,
            service_mode => c.service.mode,
            packets => c.packets,
            clock => c.clock,
            poll_cost_ns => c.poll_cost_ns,
            seed => c.seed,
            mutation => c.mutation,
            timeout_ms => c.timeout_ms,
            idle_ms => c.idle_ms,
        }
        if let Some(p) = self.pool_capacity {
            c.pool_capacity = Some(p);
        }
        if let Some(bytes) = self.size {
            c.sizes = SizeMix::Fixed { bytes };
        }
        if let Some(thread) = self.stall_thread {
            let prev = c.stall;
            c.stall = Some(StallPlan {
                thread,
                point: self
                    .stall_point
                    .or(prev.map(|s| s.point))
                    .unwrap_or(HookPoint::AfterClaim),
                occurrence: self.stall_occurrence.or(prev.map(|s| s.occurrence)).unwrap_or(1),
                duration_ms: self.stall_ms.or(prev.and_then(|s| s.duration_ms)),
            });
        }
        c.jitter |= self.jitter;
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = self.base()?;
        self.apply(&mut c);
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write the latency CDF (this many points) as CSV to this file.
    #[arg(long)]
    cdf: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    cdf_points: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// TOML with a `[[configs]]` array; each entry is an experiment.
    #[arg(long, conflicts_with = "config")]
    configs: Option<PathBuf>,
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Without a configs file: modes to cross with --thread-counts.
    #[arg(long, value_delimiter = ',', value_parser = kebab::<Mode>, default_value = "corec,baseline")]
    modes: Vec<Mode>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    thread_counts: Vec<usize>,
    /// Seed shared by every row; defaults to each config's own.
    #[arg(long = "shared-seed")]
    shared_seed: Option<u64>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Deserialize)]
struct CompareFile {
    configs: Vec<ExperimentConfig>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 4)]
    servers: usize,
    /// markovian or deterministic
    #[arg(long, value_parser = kebab::<ServiceModel>, default_value = "markovian")]
    service: ServiceModel,
    #[arg(long, default_value_t = 1.0)]
    service_rate: f64,
    /// Per-server utilizations.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9")]
    loads: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1_000_000)]
    arrivals: usize,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReorderArgs {
    /// CSV with `seq,flow_id` columns in delivery order; prints its report.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024,1500")]
    sizes: Vec<u32>,
    /// Offered load as a fraction of a link of this speed.
    #[arg(long, default_value_t = 10.0)]
    link_gbps: f64,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Deserialize)]
struct OrderRecord {
    seq: u64,
    flow_id: u32,
}

#[derive(Serialize)]
struct SizeRow {
    size_bytes: u32,
    rate_pps: f64,
    threads: usize,
    received: u64,
    reordered: u64,
    reorder_pct: f64,
    max_distance: u64,
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a ExperimentConfig,
    result: &'a RunResult,
    invariants: &'a [InvariantCheck],
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

/// Prints failed invariants to stderr; true if all held.
fn report_invariants(label: &str, checks: &[InvariantCheck]) -> bool {
    let mut ok = true;
    for c in checks.iter().filter(|c| !c.passed) {
        eprintln!(
            "{label}: invariant {} failed: {}",
            c.name,
            c.witness.as_deref().unwrap_or("")
        );
        ok = false;
    }
    ok
}

fn cmd_run(a: RunArgs) -> Result<bool> {
    let config = a.exp.config()?;
    let result = run(&config)?;
    let checks = validate_invariants(&result);
    let mut out = sink(&a.output)?;
    match a.format {
        Format::Json => {
            let report = RunReport {
                config: &config,
                result: &result,
                invariants: &checks,
            };
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
        }
        Format::Csv => write_compare_csv(&[CompareRow::from(&result)], &mut out)?,
    }
    out.flush()?;
    if let (Some(path), Some(lat)) = (&a.cdf, &result.latency) {
        lat.write_cdf_csv(a.cdf_points, File::create(path)?)?;
    }
    if result.timed_out {
        eprintln!("run hit its timeout");
    }
    Ok(report_invariants("run", &checks) && !result.timed_out)
}

fn cmd_compare(a: CompareArgs) -> Result<bool> {
    let configs: Vec<ExperimentConfig> = match &a.configs {
        Some(p) => {
            let mut file: CompareFile = read_toml(p)?;
            for c in &mut file.configs {
                a.exp.apply(c);
            }
            file.configs
        }
        None => {
            let base = a.exp.config()?;
            let base = &base;
            a.modes
                .iter()
                .flat_map(|&mode| {
                    a.thread_counts.iter().map(move |&threads| ExperimentConfig {
                        mode,
                        threads,
                        ..base.clone()
                    })
                })
                .collect()
        }
    };
    if configs.is_empty() {
        bail!("nothing to compare");
    }
    let rows = compare(&configs, a.shared_seed)?;
    let mut ok = true;
    for (row, result) in &rows {
        ok &= report_invariants(&format!("{} x{}", row.mode, row.threads), &validate_invariants(result));
    }
    let mut out = sink(&a.output)?;
    write_compare_csv(&rows.into_iter().map(|(r, _)| r).collect::<Vec<_>>(), &mut out)?;
    out.flush()?;
    Ok(ok)
}

fn cmd_sweep(a: SweepArgs) -> Result<bool> {
    let template = QueueModel::new(Topology::ScaleUp, a.servers, 0.0, a.service_rate, a.service);
    let rows = sweep(&template, &a.loads, &a.seeds, a.arrivals)?;
    let mut out = sink(&a.output)?;
    write_sweep_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(true)
}

fn cmd_reorder(a: ReorderArgs) -> Result<bool> {
    let mut out = sink(&a.output)?;
    if let Some(path) = &a.input {
        let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let (mut seqs, mut flows) = (Vec::new(), Vec::new());
        for rec in reader.deserialize::<OrderRecord>() {
            let rec = rec?;
            seqs.push(rec.seq);
            flows.push(rec.flow_id);
        }
        let report = reorder_analyze(&seqs, &flows)?;
        serde_json::to_writer_pretty(&mut out, &report)?;
        writeln!(out)?;
        out.flush()?;
        return Ok(true);
    }

    let mut base = ExperimentConfig {
        threads: 4,
        packets: 50_000,
        flows: 16,
        ..ExperimentConfig::default()
    };
    base.service.base_ns = 200.0;
    base.service.per_byte_ns = 0.1;
    if let Some(p) = &a.exp.config {
        base = read_toml(p)?;
    }
    a.exp.apply(&mut base);
    let mut w = csv::Writer::from_writer(&mut out);
    let mut ok = true;
    for &size in &a.sizes {
        let rate_pps = a.exp.rate_pps.unwrap_or_else(|| line_rate_pps(size, a.link_gbps));
        let config = ExperimentConfig {
            sizes: SizeMix::Fixed { bytes: size },
            rate_pps,
            ..base.clone()
        };
        let result = run(&config)?;
        ok &= report_invariants(&format!("{size} B"), &validate_invariants(&result));
        let r = result.reorder.unwrap_or_default();
        w.serialize(SizeRow {
            size_bytes: size,
            rate_pps,
            threads: config.threads,
            received: r.received,
            reordered: r.reordered,
            reorder_pct: r.percent,
            max_distance: r.max_distance,
        })?;
    }
    w.flush()?;
    drop(w);
    out.flush()?;
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::QueueingSweep(a) => cmd_sweep(a),
        Command::ReorderTest(a) => cmd_reorder(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
