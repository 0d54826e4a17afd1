//! `dualscale`: compute spectrum/time allocations for small AP clusters,
//! simulate them, and sweep delay-versus-load curves to CSV.

mod show;
mod sweep;

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dualscale_core::allocators::{self, AllocatorOptions, Method, Start};
use dualscale_core::corpus::{self, Layout};
use dualscale_core::queueing::FixedPointOptions;
use dualscale_core::sim::{self, SimOptions};
use dualscale_core::{AllocationFile, Error as CoreError, Scenario};

#[derive(Parser, Debug)]
#[command(name = "dualscale", version, about = "Dual-timescale spectrum and time allocation for AP clusters")]
struct Cli {
    /// More log output (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute an allocation and print its analytic delays.
    Optimize(OptimizeArgs),
    /// Simulate an allocation file and print the measured delays.
    Simulate(SimulateArgs),
    /// Run methods over load multipliers and write one CSV row per point.
    Sweep(SweepArgs),
    /// Write a generated scenario as JSON.
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    /// Stop the utilization fixed-point iteration once a step moves less than this.
    #[arg(long, default_value_t = 1e-8)]
    eps_fixed_point: f64,

    /// Stop the outer loop once the allocation moves less than this (L∞).
    #[arg(long, default_value_t = 1e-4)]
    outer_tol: f64,

    #[arg(long, default_value_t = 200)]
    max_outer: usize,

    /// Barrier weights, as multiples of the objective at the first interior point.
    #[arg(long, value_delimiter = ',', default_value = "1e-2,1e-4,1e-6")]
    barrier_stages: Vec<f64>,

    /// Starting points of the dual-timescale loops.
    #[arg(long, value_delimiter = ',', value_enum, default_value = "slow-timescale,single-slots,uniform-time,full-reuse")]
    starts: Vec<StartArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StartArg {
    SlowTimescale,
    SingleSlots,
    UniformTime,
    FullReuse,
}

impl From<StartArg> for Start {
    fn from(s: StartArg) -> Start {
        match s {
            StartArg::SlowTimescale => Start::SlowTimescale,
            StartArg::SingleSlots => Start::SingleSlots,
            StartArg::UniformTime => Start::UniformTime,
            StartArg::FullReuse => Start::FullReuse,
        }
    }
}

impl SolverArgs {
    fn options(&self) -> Result<AllocatorOptions> {
        if !(self.eps_fixed_point > 0.0) || !(self.outer_tol > 0.0) {
            return Err(usage("tolerances must be positive"));
        }
        if self.barrier_stages.is_empty() || self.barrier_stages.iter().any(|&b| !(b > 0.0)) {
            return Err(usage("barrier stages must be positive"));
        }
        let mut opts = AllocatorOptions {
            fixed_point: FixedPointOptions { eps: self.eps_fixed_point, ..Default::default() },
            outer_tol: self.outer_tol,
            max_outer: self.max_outer,
            starts: self.starts.iter().map(|&s| s.into()).collect(),
            ..Default::default()
        };
        opts.solver.barrier_factors = self.barrier_stages.clone();
        Ok(opts)
    }
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    /// Scenario JSON file.
    scenario: PathBuf,

    #[arg(long, default_value = "p2", value_parser = parse_method)]
    method: Method,

    /// Scale every arrival rate by this factor.
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    load_mult: f64,

    /// Write the allocation file here.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Print the full result as JSON instead of text.
    #[arg(long)]
    json: bool,

    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario JSON file.
    scenario: PathBuf,

    /// Allocation file written by `optimize --out`.
    #[arg(long)]
    allocation: PathBuf,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Measured packets, warm-up included.
    #[arg(long, default_value_t = 200_000)]
    packets: u64,

    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    load_mult: f64,

    #[arg(long, default_value_t = 0.1)]
    warmup: f64,

    #[arg(long, default_value_t = 20)]
    batches: usize,

    /// Append the CSV row to this file (header written when the file is new).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Scenario JSON file.
    scenario: PathBuf,

    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "p1,p2,full-reuse,conservative")]
    methods: Vec<Method>,

    /// Load multipliers.
    #[arg(long, value_delimiter = ',', value_parser = positive, default_value = "1")]
    loads: Vec<f64>,

    /// Simulation seeds; several seeds are treated as independent replications.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,

    /// Simulated packets per point and seed; 0 skips simulation.
    #[arg(long, default_value_t = 100_000)]
    packets: u64,

    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,

    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,

    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    /// One AP with a given solo rate.
    SingleAp,
    /// Random APs with one group each (fixed association).
    Fixed,
    /// Random APs and groups, flexible association.
    Flexible,
    /// APs on a line, one group each.
    Line,
    /// The eight-AP sweep cluster.
    Cluster,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: Kind,

    #[arg(long, default_value_t = 3)]
    aps: usize,

    /// UE groups (flexible kind only).
    #[arg(long, default_value_t = 4)]
    groups: usize,

    /// Layout seed (default 1; the cluster kind defaults to the standard sweep cluster).
    #[arg(long)]
    seed: Option<u64>,

    /// Use the dense layout (closer APs, farther users).
    #[arg(long)]
    dense: bool,

    /// Solo rate in packets/s (single-ap kind).
    #[arg(long, default_value_t = 2.0)]
    rate: f64,

    /// Arrival rate per group in packets/s (single-ap kind).
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,

    /// AP spacing in meters (line kind).
    #[arg(long, default_value_t = 50.0)]
    spacing: f64,

    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A problem with the arguments found after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse()
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(_) => Err(format!("{s} is not a positive number")),
        Err(e) => Err(e.to_string()),
    }
}

fn load_scenario(path: &Path, mult: f64) -> Result<Scenario> {
    let s = Scenario::from_path(path).with_context(|| format!("reading scenario {}", path.display()))?;
    Ok(if mult == 1.0 { s } else { s.scaled_load(mult) })
}

fn optimize(args: &OptimizeArgs) -> Result<()> {
    let opts = args.solver.options()?;
    let scenario = load_scenario(&args.scenario, args.load_mult)?;
    let sol = allocators::solve(args.method, &scenario, &opts)?;
    let file = sol.allocation.to_file(&scenario, args.method.name());
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if args.json {
        let doc = serde_json::json!({
            "method": args.method.name(),
            "load_mult": args.load_mult,
            "allocation": file,
            "rho": sol.state.rho,
            "sigma": sol.state.sigma,
            "delays": sol.report,
            "objective": sol.objective,
            "trace": sol.trace,
        });
        serde_json::to_writer_pretty(&mut out, &doc)?;
        writeln!(out)?;
    } else {
        show::solution(&mut out, &scenario, &sol, args.load_mult)?;
    }
    if let Some(path) = &args.out {
        file.write(path).with_context(|| format!("writing {}", path.display()))?;
        log::info!("allocation written to {}", path.display());
    }
    Ok(())
}

const SIM_HEADER: &str = "method,load_mult,seed,packets,sim_delay_s,sim_ci_s";

fn simulate(args: &SimulateArgs) -> Result<()> {
    if !(0.0..1.0).contains(&args.warmup) || args.batches < 2 {
        return Err(usage("--warmup must lie in [0, 1) and --batches must be at least 2"));
    }
    let scenario = load_scenario(&args.scenario, args.load_mult)?;
    let file = AllocationFile::read(&args.allocation)
        .with_context(|| format!("reading allocation {}", args.allocation.display()))?;
    let method = file.method.clone();
    let alloc = file.into_allocation(&scenario)?;
    let opts = SimOptions {
        n_packets: args.packets,
        seed: args.seed,
        warmup_fraction: args.warmup,
        batches: args.batches,
        ..Default::default()
    };
    let res = sim::simulate(&scenario, &alloc, &opts)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    show::report(&mut out, &scenario, &res.report)?;
    let row = format!(
        "{},{},{},{},{},{}",
        method,
        args.load_mult,
        args.seed,
        args.packets,
        res.report.network_mean_s,
        res.report.network_ci_s.map(|c| c.to_string()).unwrap_or_default()
    );
    writeln!(out, "{SIM_HEADER}\n{row}")?;
    if let Some(path) = &args.out {
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{SIM_HEADER}")?;
        }
        writeln!(f, "{row}")?;
    }
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    if args.methods.is_empty() {
        return Err(usage("at least one method is required"));
    }
    let spec = sweep::SweepSpec {
        scenario: load_scenario(&args.scenario, 1.0)?,
        methods: args.methods.clone(),
        loads: args.loads.clone(),
        seeds: args.seeds.clone(),
        packets: args.packets,
        opts: args.solver.options()?,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs.unwrap_or(0)).build()?;
    let rows = pool.install(|| sweep::run(&spec));
    match &args.out {
        Some(path) => {
            let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            sweep::write_csv(&rows, f)?;
        }
        None => sweep::write_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn generate(args: &GenerateArgs) -> Result<()> {
    if args.aps == 0 || args.groups == 0 {
        bail!(usage("--aps and --groups must be at least 1"));
    }
    let layout = if args.dense { Layout::dense() } else { Layout::default() };
    let seed = args.seed.unwrap_or(1);
    let scenario = match args.kind {
        Kind::SingleAp => {
            if !(args.rate > 0.0) || !(args.lambda >= 0.0) {
                return Err(usage("--rate must be positive and --lambda nonnegative"));
            }
            corpus::single_ap(args.rate, args.lambda)
        }
        Kind::Fixed => corpus::random_fixed(args.aps, seed, &layout),
        Kind::Flexible => corpus::random_flexible(args.aps, args.groups, seed, &layout),
        Kind::Line => corpus::line(args.aps, args.spacing, 10.0, &layout),
        Kind::Cluster => corpus::eight_ap_cluster(args.seed.unwrap_or(corpus::EIGHT_AP_SEED)),
    };
    let text = scenario.to_json_string()?;
    match &args.out {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

/// 2 for bad input, 3 when no stable allocation exists, 4 for numerical
/// failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Infeasible(_) | CoreError::UnstableQueue { .. } | CoreError::Saturated { .. } => 3,
                CoreError::NoConvergence { .. }
                | CoreError::NumericalStall(_)
                | CoreError::ZeroServiceRate { .. }
                | CoreError::NonContractiveStart { .. }
                | CoreError::DegenerateUtilization { .. } => 4,
                _ => 2,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let result = match &cli.command {
        Command::Optimize(a) => optimize(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Generate(a) => generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
