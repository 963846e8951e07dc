//! `llr`: spectral analysis, learning-rate plans, schedules and toy training runs.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use llr_core::allocate::{Assignment, PlanConfig};
use llr_core::htsr::{FitConfig, FitMethod};
use llr_core::io::{self as lio, IoError, RunConfig, ScheduleRequest};
use llr_core::schedule::{write_timeline_csv, BaseSchedule, ScheduleConfig, SwitchMode};
use llr_core::Error;

const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "llr", version, about = "Heavy-tail guided layerwise learning rates")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer spectra and tail exponents of a checkpoint, optionally with assigned rates.
    Analyze(AnalyzeArgs),
    /// Per-layer base learning rates for a checkpoint.
    Plan(PlanArgs),
    /// Per-layer learning-rate timeline of a hypothetical run, as CSV.
    Schedule(ScheduleArgs),
    /// Train the toy model from a TOML config.
    Train(TrainArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Method {
    Median,
    Fixfinger,
    Gof,
}

impl From<Method> for FitMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Median => FitMethod::Median,
            Method::Fixfinger => FitMethod::FixFinger,
            Method::Gof => FitMethod::GoodnessOfFit,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AssignArg {
    Linear,
    Sqrt,
    Log2,
    #[value(name = "linear-inv")]
    LinearInv,
}

impl From<AssignArg> for Assignment {
    fn from(a: AssignArg) -> Self {
        match a {
            AssignArg::Linear => Assignment::Linear,
            AssignArg::Sqrt => Assignment::Sqrt,
            AssignArg::Log2 => Assignment::Log2,
            AssignArg::LinearInv => Assignment::LinearInverse,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BaseArg {
    Cosine,
    Wsd,
}

#[derive(Args, Debug)]
struct PlanFlags {
    /// Base (minimum) learning rate.
    #[arg(long)]
    eta: Option<f64>,
    /// Ratio between the largest and smallest assigned rate.
    #[arg(long)]
    s: Option<f64>,
    #[arg(long, value_enum)]
    assignment: Option<AssignArg>,
    /// Do not pin embedding and output head to the upper rate.
    #[arg(long)]
    no_embedding_override: bool,
}

impl PlanFlags {
    fn any(&self) -> bool {
        self.eta.is_some() || self.s.is_some() || self.assignment.is_some() || self.no_embedding_override
    }

    fn config(&self) -> PlanConfig {
        let d = PlanConfig::default();
        PlanConfig {
            eta: self.eta.unwrap_or(d.eta),
            s: self.s.unwrap_or(d.s),
            assignment: self.assignment.map_or(d.assignment, Into::into),
            embedding_override: !self.no_embedding_override,
            ..d
        }
    }
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "median")]
    method: Method,
    #[command(flatten)]
    plan: PlanFlags,
    /// Report path (`-` for stdout).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "median")]
    method: Method,
    #[command(flatten)]
    plan: PlanFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long)]
    steps: u64,
    /// Steps between plan recomputes.
    #[arg(long)]
    interval: u64,
    /// Soft-switch window length.
    #[arg(long = "switch")]
    t_switch: u64,
    /// Fraction of training during which plans are recomputed.
    #[arg(long)]
    active: f64,
    #[arg(long, value_enum, default_value = "cosine")]
    base: BaseArg,
    /// Warmup steps (default: 10% of `--steps`).
    #[arg(long)]
    warmup: Option<u64>,
    /// Final rate as a fraction of the peak.
    #[arg(long, default_value_t = 0.0)]
    min_lr_fraction: f64,
    /// Jump to new rates instead of interpolating.
    #[arg(long)]
    hard: bool,
    /// Checkpoint whose exponents drive the plan; without it a single `global` layer is scheduled.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "median")]
    method: Method,
    #[command(flatten)]
    plan: PlanFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving `timeline.csv` and `summary.json`.
    #[arg(long)]
    out: PathBuf,
}

fn open_out(path: &Path) -> Result<Box<dyn Write>, Error> {
    if path == Path::new("-") {
        return Ok(Box::new(io::stdout().lock()));
    }
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn io_err(path: &Path, source: io::Error) -> Error {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
    .into()
}

fn write_with<F>(path: &Path, f: F) -> Result<(), Error>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let mut out = open_out(path)?;
    f(&mut out).and_then(|_| out.flush()).map_err(|e| io_err(path, e))
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Analyze(a) => {
            let fit = FitConfig::with_method(a.method.into());
            let plan = a.plan.any().then(|| a.plan.config());
            let report = lio::cmd_analyze(&a.manifest, &fit, plan.as_ref())?;
            write_with(&a.out, |w| lio::write_json(&report, w))
        }
        Command::Plan(a) => {
            let fit = FitConfig::with_method(a.method.into());
            let doc = lio::cmd_plan(&a.manifest, &fit, &a.plan.config())?;
            write_with(&a.out, |w| lio::write_json(&doc, w))
        }
        Command::Schedule(a) => {
            let schedule = ScheduleConfig {
                base: match a.base {
                    BaseArg::Cosine => BaseSchedule::CosineWarmup,
                    BaseArg::Wsd => BaseSchedule::Wsd,
                },
                t_max: a.steps,
                warmup_steps: a.warmup.unwrap_or(a.steps / 10),
                min_lr_fraction: a.min_lr_fraction,
                recompute_interval: a.interval,
                t_switch: a.t_switch,
                active_fraction: a.active,
                switch_mode: if a.hard { SwitchMode::Hard } else { SwitchMode::Soft },
                ..ScheduleConfig::default()
            };
            let req = ScheduleRequest {
                schedule,
                plan: a.plan.config(),
                fit: FitConfig::with_method(a.method.into()),
                manifest: a.manifest,
            };
            let rows = lio::cmd_schedule(&req)?;
            write_with(&a.out, |w| write_timeline_csv(&rows, w))
        }
        Command::Train(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let summary = lio::cmd_train(&cfg, &a.out)?;
            log::info!("final loss {}", lio::sig17(summary.final_loss));
            Ok(())
        }
    }
}

fn report(kind: &str, message: &str, code: u8) {
    let record = serde_json::json!({ "error": { "kind": kind, "message": message, "exit_code": code } });
    eprintln!("{record}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            report("usage", &e.kind().to_string(), EXIT_USAGE);
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code() as u8;
            let kind = match code {
                2 => "usage",
                3 => "data",
                _ => "numerical",
            };
            report(kind, &e.to_string(), code);
            ExitCode::from(code)
        }
    }
}
