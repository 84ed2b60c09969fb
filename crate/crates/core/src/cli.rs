//! Command-line front end: `analyze`, `simulate` and `bench`.
//!
//! Exit codes: 0 success, 2 input error, 3 degraded (partial report
//! written), 4 internal error. Failures print one JSON object to stderr.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{self, BenchSpec};
use crate::decay::Weighting;
use crate::error::{Error, Result};
use crate::estimators::{write_curves_csv, Method};
use crate::exec::{with_jobs, Exec};
use crate::metrics::{bootstrap_report, AnalysisOptions, AnalysisReport, BootstrapOptions};
use crate::panel::{aggregate, read_events, write_events, Dataset, PanelMode};
use crate::simulate::{generate_with, SimConfig, Truth};

#[derive(Debug, Parser)]
#[command(
    name = "cohort-lte",
    version,
    about = "Long-term effect and lifetime value estimation for staggered A/B tests"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate STE, LTE and ΔERLV from a user-day event log.
    Analyze(AnalyzeArgs),
    /// Write a synthetic event log plus a ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    InverseVariance,
    Unit,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::InverseVariance => Weighting::InverseVariance,
            WeightingArg::Unit => Weighting::Unit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Comparison,
    NoveltyChurn,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Event CSV with columns user_id,arm,entry_day,day,metric,active.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Bootstrap seed; generated and reported when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    pub bootstrap: usize,
    /// STE window in days.
    #[arg(long, default_value_t = 7)]
    pub window: u32,
    /// Last elapsed day of the ΔERLV sum (default: duration).
    #[arg(long)]
    pub horizon: Option<u32>,
    /// First elapsed day of the ΔERLV sum.
    #[arg(long, default_value_t = 0)]
    pub start: u32,
    #[arg(long, value_delimiter = ',', default_value = "CCD,DiD,MC")]
    pub methods: Vec<Method>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Experiment duration in days (default: last day in the log + 1).
    #[arg(long)]
    pub duration: Option<u32>,
    #[arg(long, value_enum, default_value_t = WeightingArg::InverseVariance)]
    pub weighting: WeightingArg,
    /// Also write the metric and presence cohort panels.
    #[arg(long)]
    pub export_panels: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config JSON; unspecified fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Event CSV to write; the truth sidecar goes next to it.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub duration: Option<u32>,
    /// Horizon for the sidecar's true ΔERLV (default: duration).
    #[arg(long)]
    pub horizon: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Bench spec JSON; overrides --preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Comparison)]
    pub preset: Preset,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sims: Option<usize>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub window: Option<u32>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// How a successful run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Degraded,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Ok => 0,
            Outcome::Degraded => 3,
        }
    }
}

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 4;

pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::DuplicateObservation { .. }
        | Error::EmptyPanel
        | Error::InvalidRecord { .. }
        | Error::DurationTooShort(_)
        | Error::MalformedCsv { .. }
        | Error::EmptyArm { .. }
        | Error::InvalidConfig(_)
        | Error::InvalidHazard { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_INPUT,
        Error::Unavailable { .. } | Error::OutOfRange { .. } | Error::Unfittable { .. } | Error::BadFitInput(_) => {
            EXIT_INTERNAL
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

/// The JSON line printed to stderr on failure.
pub fn error_json(e: &Error) -> String {
    let code = error_exit_code(e);
    let body = ErrorBody {
        error: if code == EXIT_INPUT { "input" } else { "internal" },
        message: e.to_string(),
        exit_code: code,
    };
    serde_json::to_string(&body).unwrap_or_else(|_| format!("{{\"exit_code\":{code}}}"))
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s}");
        s
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn load_dataset(input: &Path, duration: Option<u32>) -> Result<Dataset> {
    let file = fs::File::open(input)?;
    let (records, observed) = read_events(std::io::BufReader::new(file))?;
    Dataset::from_records(&records, duration.unwrap_or(observed))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<Outcome> {
    if args.methods.is_empty() {
        return Err(Error::InvalidConfig("--methods is empty".into()));
    }
    if args.window == 0 {
        return Err(Error::InvalidConfig("--window must be at least 1".into()));
    }
    let data = load_dataset(&args.input, args.duration)?;
    let seed = resolve_seed(args.seed);
    let mut methods = args.methods.clone();
    methods.sort_by_key(|m| Method::ALL.iter().position(|x| x == m));
    methods.dedup();
    let opts = AnalysisOptions {
        horizon: args.horizon,
        start: args.start,
        window: args.window,
        methods: methods.clone(),
        weighting: args.weighting.into(),
    };
    let boot = BootstrapOptions {
        replicates: args.bootstrap,
        seed,
        exec: Exec::from_jobs(args.jobs),
    };
    eprintln!(
        "analyzing {} users over {} days with {} bootstrap replicates",
        data.len(),
        data.duration(),
        args.bootstrap
    );
    let report: AnalysisReport = with_jobs(args.jobs, || bootstrap_report(&data, &opts, &boot))?;

    fs::create_dir_all(&args.output)?;
    write_json(&args.output.join("report.json"), &report)?;
    for m in &methods {
        let path = args.output.join(format!("curves_{m}.csv"));
        write_curves_csv(&report.curves_for(*m), BufWriter::new(fs::File::create(path)?))?;
    }
    if args.export_panels {
        for (mode, name) in [
            (PanelMode::Metric, "panel_metric.csv"),
            (PanelMode::Presence, "panel_presence.csv"),
        ] {
            let panel = aggregate(&data, mode, None, Exec::from_jobs(args.jobs));
            panel.write_csv(BufWriter::new(fs::File::create(args.output.join(name))?))?;
        }
    }

    let complete = report.ste.is_some()
        && report.lte.is_some() == methods.contains(&Method::Mc)
        && report.derlv.is_some() == methods.contains(&Method::Mc)
        && report.baselines.iter().all(|b| b.lte.is_some() && b.derlv.is_some());
    if report.unstable || !complete {
        for d in &report.diagnostics {
            eprintln!("warning: {d}");
        }
        return Ok(Outcome::Degraded);
    }
    Ok(Outcome::Ok)
}

fn truth_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("events");
    output.with_file_name(format!("{stem}.truth.json"))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Outcome> {
    let mut config = match &args.config {
        Some(p) => serde_json::from_reader(std::io::BufReader::new(fs::File::open(p)?))?,
        None => SimConfig::default(),
    };
    config.seed = args.seed.unwrap_or_else(|| {
        if args.config.is_some() {
            config.seed
        } else {
            resolve_seed(None)
        }
    });
    if let Some(n) = args.users {
        config.n_users = n;
    }
    if let Some(d) = args.duration {
        config.duration = d;
    }
    config.validate()?;
    let horizon = args.horizon.unwrap_or(config.duration);
    eprintln!(
        "simulating {} users over {} days (seed {})",
        config.n_users, config.duration, config.seed
    );
    let records = with_jobs(args.jobs, || generate_with(&config, Exec::from_jobs(args.jobs)))?;
    if let Some(dir) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_events(&records, BufWriter::new(fs::File::create(&args.output)?))?;
    write_json(&truth_path(&args.output), &Truth::for_config(&config, horizon))?;
    Ok(Outcome::Ok)
}

pub fn bench_spec(args: &BenchArgs) -> Result<BenchSpec> {
    let mut spec = match &args.spec {
        Some(p) => serde_json::from_reader(std::io::BufReader::new(fs::File::open(p)?))?,
        None => match args.preset {
            Preset::Comparison => BenchSpec::comparison(),
            Preset::NoveltyChurn => BenchSpec::novelty_churn(),
        },
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.sims {
        spec.n_sims = n;
    }
    if let Some(n) = args.users {
        spec.n_users = n;
    }
    if let Some(b) = args.bootstrap {
        spec.bootstrap = b;
    }
    if let Some(m) = &args.methods {
        spec.methods = m.clone();
    }
    if let Some(w) = args.window {
        spec.window = w;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<Outcome> {
    let spec = bench_spec(args)?;
    let jobs = args.jobs.unwrap_or(0);
    eprintln!("running {} sims of {} users", spec.n_sims, spec.n_users);
    let report = with_jobs(jobs, || bench::run(&spec, Exec::from_jobs(jobs)))?;

    fs::create_dir_all(&args.output)?;
    write_json(&args.output.join("bench_report.json"), &report)?;
    report.write_rows_csv(BufWriter::new(fs::File::create(args.output.join("sims.csv"))?))?;
    if let Some(curves) = &report.mean_curves {
        curves.write_csv(BufWriter::new(fs::File::create(args.output.join("mean_curves.csv"))?))?;
    }
    for s in &report.methods {
        eprintln!(
            "{:>4}: ci width {:.4}  MAE LTE {:.4}  MAE dERLV {:.4}  (n = {})",
            s.method.name(),
            s.ci_width.mean,
            s.mae_lte.mean,
            s.mae_derlv.mean,
            s.n
        );
    }
    if let Some(s) = &report.novelty_churn {
        eprintln!(
            "STE {:.4} ± {:.4}  LTE {:.4} ± {:.4}  dERLV {:.4} ± {:.4}  LTE CI covers 0 in {}/{}",
            s.ste.mean, s.ste.std, s.lte.mean, s.lte.std, s.derlv.mean, s.derlv.std, s.lte_ci_covers_zero, s.n
        );
    }
    if report.n_failed > 0 {
        eprintln!("{} of {} sims failed", report.n_failed, spec.n_sims);
    }
    Ok(Outcome::Ok)
}

/// Dispatches a parsed command.
pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bench(a) => cmd_bench(a),
    }
}
