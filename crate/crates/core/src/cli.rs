//! Command-line pipeline: `subset-stats`, `gen-target`, `plan`,
//! `construct`, `verify`. Every output file embeds the resolved command
//! that produced it.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O or inconsistent files, 4 a
//! construction missed its budget, 5 verification failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::activation::Activation;
use crate::construction::{self, PlanOptions, SourcePlan, Variant};
use crate::error::Error;
use crate::network::{
    apply_mask, load_mask, load_network, load_target, random_target, read_json, save_mask, save_network,
    write_json, LayerArch,
};
use crate::subset_sum::{run_statistics, BaseDistribution, SolveMode};
use crate::verification::{
    param_reconstruction, sparsity_accounting, verify_sup_error, write_reconstruction_csv, InputDomain,
};

/// Environment variable holding the default worker cap.
pub const THREADS_ENV: &str = "CONV_TICKETS_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "conv-tickets", version, about = "Strong lottery tickets for convolutional networks")]
pub struct Cli {
    /// Worker threads (default: available cores, or $CONV_TICKETS_THREADS).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Monte-Carlo statistics of random subset-sum problems.
    SubsetStats(SubsetStatsArgs),
    /// Writes a random target network.
    GenTarget(GenTargetArgs),
    /// Plans a source network for a target.
    Plan(PlanArgs),
    /// Samples the source and masks it down to a ticket.
    Construct(ConstructArgs),
    /// Compares a ticket (or any network) with the target on random inputs.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SubsetStatsArgs {
    #[arg(long, default_value = "uniform")]
    pub dist: String,
    #[arg(long, default_value_t = 15)]
    pub m: usize,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value = "optimal")]
    pub mode: String,
    /// Tolerance a subset must meet.
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix: writes `<out>.csv` and `<out>.json`.
    #[arg(long, default_value = "subset_stats")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenTargetArgs {
    /// Comma-separated `INxOUT:KERNEL[:STRIDE]`, e.g. `3x4:3,4x4:3`.
    #[arg(long)]
    pub layers: String,
    #[arg(long, default_value = "relu")]
    pub act: String,
    #[arg(long, default_value_t = 0.5)]
    pub theta_max: f64,
    /// Adds an identity skip from layer K to layer K+1 (repeatable).
    #[arg(long, value_delimiter = ',')]
    pub residual: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spatial rank: 1 or 2.
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, default_value = "target.net.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PlanArgs {
    #[arg(long)]
    pub target: PathBuf,
    /// `2l` or `lp1`.
    #[arg(long, default_value = "2l")]
    pub variant: String,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 3.0)]
    pub c: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Block size override.
    #[arg(long)]
    pub m: Option<usize>,
    /// Spare neurons per layer.
    #[arg(long)]
    pub spare: Option<usize>,
    /// Per-parameter subset-sum tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value = "threshold")]
    pub mode: String,
    #[arg(long)]
    pub looks_linear: bool,
    /// Spatial input size, e.g. `8x8`; needed for strided targets.
    #[arg(long)]
    pub input_dims: Option<String>,
    #[arg(long, default_value = "plan.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ConstructArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// Seed of the random source network.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for source, mask, ticket and report files.
    #[arg(long, default_value = "ticket")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub ticket: PathBuf,
    /// Construction report; adds per-layer deviations.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Source and mask; with `report`, adds sparsity accounting and
    /// per-problem reconstruction.
    #[arg(long, requires_all = ["mask", "report"])]
    pub source: Option<PathBuf>,
    #[arg(long, requires_all = ["source", "report"])]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Spatial input size, e.g. `8x8` (default 8 per spatial axis).
    #[arg(long)]
    pub input_dims: Option<String>,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub low: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub high: f64,
    #[arg(long, default_value = "verify.json")]
    pub out: PathBuf,
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Budget(String),
    Verify(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Io(_) => EXIT_IO,
            Failure::Budget(_) => EXIT_BUDGET,
            Failure::Verify(_) => EXIT_VERIFY,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Budget(m) | Failure::Verify(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. }
            | Error::Format(_)
            | Error::Version { .. }
            | Error::PlanMismatch(_)
            | Error::Shape(_)
            | Error::ChannelMismatch { .. }
            | Error::NonFinite(_)
            | Error::MissingActivation(_) => Failure::Io(msg),
            _ => Failure::Usage(msg),
        }
    }
}

type CmdResult = std::result::Result<Value, Failure>;

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

/// Runs a parsed command with the requested worker cap.
pub fn execute(cli: &Cli) -> CmdResult {
    let pool = match cli.threads {
        Some(0) => return Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| Failure::Usage(e.to_string()))?;
    pool.install(|| dispatch(&cli.command))
}

fn dispatch(cmd: &Command) -> CmdResult {
    let config = run_config(cmd);
    match cmd {
        Command::SubsetStats(a) => subset_stats(a, config),
        Command::GenTarget(a) => gen_target(a, config),
        Command::Plan(a) => plan(a, config),
        Command::Construct(a) => construct(a, config),
        Command::Verify(a) => verify(a, config),
    }
}

/// The resolved command as embedded in outputs.
pub fn run_config(cmd: &Command) -> Value {
    let mut v = serde_json::to_value(cmd).unwrap_or(Value::Null);
    if let Value::Object(m) = &mut v {
        m.insert("tool_version".into(), json!(env!("CARGO_PKG_VERSION")));
    }
    v
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn parse_dims(s: &str) -> std::result::Result<Vec<usize>, Failure> {
    s.split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|_| usage(format!("bad dims `{s}`"))))
        .collect()
}

/// `INxOUT:KERNEL[:STRIDE]`, comma separated.
pub fn parse_layers(s: &str) -> std::result::Result<Vec<LayerArch>, Failure> {
    s.split(',')
        .map(|item| {
            let bad = || usage(format!("bad layer `{item}`; expected INxOUT:KERNEL[:STRIDE]"));
            let parts: Vec<&str> = item.trim().split(':').collect();
            if !(2..=3).contains(&parts.len()) {
                return Err(bad());
            }
            let (i, o) = parts[0].split_once('x').ok_or_else(bad)?;
            let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
            let arch = LayerArch {
                in_channels: num(i)?,
                out_channels: num(o)?,
                kernel: num(parts[1])?,
                stride: parts.get(2).map_or(Ok(1), |t| num(t))?,
            };
            if arch.in_channels == 0 || arch.out_channels == 0 || arch.kernel == 0 || arch.stride == 0 {
                return Err(bad());
            }
            Ok(arch)
        })
        .collect()
}

fn create_parent(path: &Path) -> std::result::Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn subset_stats(a: &SubsetStatsArgs, config: Value) -> CmdResult {
    let dist: BaseDistribution = a.dist.parse().map_err(usage)?;
    let mode: SolveMode = a.mode.parse().map_err(usage)?;
    if a.m == 0 || a.m > 63 {
        return Err(usage("--m must lie in 1..=63"));
    }
    let t0 = Instant::now();
    let report = run_statistics(dist, a.m, a.trials, a.eps, mode, a.seed)?;
    let elapsed = t0.elapsed().as_secs_f64();
    create_parent(&a.out)?;
    let (csv, json_path) = (with_suffix(&a.out, ".csv"), with_suffix(&a.out, ".json"));
    report.write_csv(&csv, &config)?;
    let summary = json!({ "config": config, "summary": report, "elapsed_seconds": elapsed });
    write_json(&json_path, &summary)?;
    Ok(summary)
}

fn gen_target(a: &GenTargetArgs, config: Value) -> CmdResult {
    let act: Activation = a.act.parse().map_err(usage)?;
    let layers = parse_layers(&a.layers)?;
    for w in layers.windows(2) {
        if w[0].out_channels != w[1].in_channels {
            return Err(usage("consecutive layers disagree on channels"));
        }
    }
    if let Some(&k) = a.residual.iter().find(|&&k| k == 0 || k >= layers.len()) {
        return Err(usage(format!("--residual {k} needs layers {k} and {}", k + 1)));
    }
    let net = random_target(&layers, a.rank, act, a.theta_max, &a.residual, a.seed)?;
    create_parent(&a.out)?;
    save_network(&net, &a.out, &config)?;
    Ok(json!({
        "config": config,
        "out": a.out,
        "depth": net.depth(),
        "parameters": net.parameter_count(),
        "skips": net.skips().len(),
    }))
}

/// A plan file: the plan plus the command that made it.
#[derive(Debug, Serialize, Deserialize)]
pub struct PlanFile {
    pub config: Value,
    pub plan: SourcePlan,
}

fn plan(a: &PlanArgs, config: Value) -> CmdResult {
    let (target, _) = load_target(&a.target)?;
    let variant: Variant = a.variant.parse().map_err(usage)?;
    let mut opts = PlanOptions::new(a.eps, a.delta);
    opts.c = a.c;
    opts.gamma = a.gamma;
    opts.block_size = a.m;
    opts.spare = a.spare;
    opts.param_tolerance = a.tolerance;
    opts.solve_mode = a.mode.parse().map_err(usage)?;
    opts.looks_linear = a.looks_linear;
    opts.input_dims = a.input_dims.as_deref().map(parse_dims).transpose()?;
    let plan = construction::plan(&target, variant, &opts)?;
    create_parent(&a.out)?;
    let file = PlanFile { config: config.clone(), plan };
    write_json(&a.out, &file)?;
    Ok(json!({
        "config": config,
        "out": a.out,
        "variant": file.plan.variant,
        "widths": file.plan.widths,
        "budgets": file.plan.budgets,
        "block": file.plan.block,
        "rho": file.plan.rho,
    }))
}

fn construct(a: &ConstructArgs, config: Value) -> CmdResult {
    let (target, _) = load_target(&a.target)?;
    let file: PlanFile = read_json(&a.plan)?;
    let t0 = Instant::now();
    let source = construction::sample_source(&file.plan, a.seed)?;
    let (mask, report) = construction::construct(&target, &source, &file.plan, a.seed)?;
    let ticket = apply_mask(&source, &mask)?;
    let elapsed = t0.elapsed().as_secs_f64();
    fs::create_dir_all(&a.out_dir).map_err(|e| Failure::Io(format!("{}: {e}", a.out_dir.display())))?;
    let path = |name: &str| a.out_dir.join(name);
    save_network(&source, &path("source.net.json"), &config)?;
    save_mask(&mask, &path("ticket.mask.json"), &config)?;
    save_network(&ticket, &path("ticket.net.json"), &config)?;
    report.write_csv(&path("problems.csv"), &config)?;
    write_json(&path("report.json"), &json!({ "config": config, "report": report }))?;
    let summary = json!({
        "config": config,
        "out_dir": a.out_dir,
        "problems": report.problems.len(),
        "failed_problems": report.failed_problems,
        "max_error": report.max_error(),
        "ticket_nonzeros": report.ticket_nonzeros,
        "sparsity_ratio": report.sparsity_ratio,
        "mean_subset_size": report.mean_subset_size,
        "elapsed_seconds": elapsed,
    });
    if report.budget_breach {
        println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
        return Err(Failure::Budget(format!(
            "{} subset-sum problems missed their tolerance",
            report.failed_problems
        )));
    }
    Ok(summary)
}

#[derive(Deserialize)]
struct ReportFile {
    report: construction::ConstructionReport,
}

fn verify(a: &VerifyArgs, config: Value) -> CmdResult {
    let (target, _) = load_network(&a.target)?;
    let (ticket, _) = load_network(&a.ticket)?;
    let dims = match &a.input_dims {
        Some(s) => parse_dims(s)?,
        None => vec![8; target.spatial_rank()],
    };
    let domain = InputDomain {
        channels: target.input_channels(),
        dims,
        low: a.low,
        high: a.high,
    };
    let report = a.report.as_deref().map(read_json::<ReportFile>).transpose()?.map(|r| r.report);
    let layer_map = report.as_ref().map_or(&[][..], |r| &r.layer_map[..]);
    let v = verify_sup_error(&target, &ticket, a.samples, a.seed, &domain, layer_map)?.judge(a.eps);
    let mut out = json!({ "config": config, "verification": v });
    if let (Some(src), Some(mask), Some(rep)) = (&a.source, &a.mask, &report) {
        let (source, _) = load_network(src)?;
        let (mask, _) = load_mask(mask)?;
        let sparsity = sparsity_accounting(&target, &ticket, &source, rep, &mask);
        let rows = param_reconstruction(&target, &source, &mask, rep)?;
        create_parent(&a.out)?;
        write_reconstruction_csv(&rows, &with_suffix(&a.out, ".problems.csv"), &config)?;
        out["sparsity"] = serde_json::to_value(&sparsity).map_err(usage)?;
        out["reconstruction"] = json!({
            "problems": rows.len(),
            "all_match_report": rows.iter().all(|r| r.matches_report),
            "max_error": rows.iter().map(|r| r.error).fold(0.0, f64::max),
        });
    }
    create_parent(&a.out)?;
    write_json(&a.out, &out)?;
    if v.passed == Some(false) {
        println!("{}", serde_json::to_string_pretty(&out).unwrap_or_default());
        return Err(Failure::Verify(format!("sup error {:e} exceeds {:e}", v.sup_error, a.eps)));
    }
    Ok(out)
}
