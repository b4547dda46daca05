use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pathreserve::cli::{self, ExitStatus, MeasureName, ModelKind, RunConfig, Verb};
use pathreserve::Error;

/// Path-dependent reserves for equity-linked life insurance.
#[derive(Parser, Debug)]
#[command(name = "pathreserve", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for artifacts; overrides `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Top-level seed; overrides `numerics.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate asset paths (and chain trajectories for multi-state models).
    Simulate(SimulateArgs),
    /// State-wise reserves along a realized history.
    Reserve,
    /// Thiele residuals over a battery of history stubs.
    CheckThiele,
    /// Functional Itô reconstruction on Brownian paths.
    CheckIto,
    /// Direct versus nested reserve estimates.
    CheckCrossvalidate,
    /// Premium level making the entry reserve vanish.
    SolvePremium,
    /// Print a starting config to stdout.
    ExampleConfig,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    measure: Option<MeasureArg>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output file: binary cache for `.bin`, CSV otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModelArg {
    BlackScholes,
    AffineAverage,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MeasureArg {
    P,
    Q,
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse(&format!("schema = \"{}\"\n", cli::SCHEMA))?,
    };
    if let Some(seed) = cli.seed {
        cfg.numerics.seed = seed;
    }
    if let Command::Simulate(a) = &cli.command {
        if let Some(m) = a.model {
            cfg.market.model = match m {
                ModelArg::BlackScholes => ModelKind::BlackScholes,
                ModelArg::AffineAverage => ModelKind::AffineAverage,
            };
        }
        if let Some(m) = a.measure {
            cfg.numerics.measure = match m {
                MeasureArg::P => MeasureName::P,
                MeasureArg::Q => MeasureName::Q,
            };
        }
        if let Some(p) = a.paths {
            cfg.numerics.paths = p;
        }
        if let Some(s) = a.steps {
            cfg.numerics.steps = s;
        }
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<ExitStatus, Error> {
    let verb = match &cli.command {
        Command::ExampleConfig => {
            print!("{}", cli::example_config());
            return Ok(ExitStatus::Ok);
        }
        Command::Simulate(_) => Verb::Simulate,
        Command::Reserve => Verb::Reserve,
        Command::CheckThiele => Verb::CheckThiele,
        Command::CheckIto => Verb::CheckIto,
        Command::CheckCrossvalidate => Verb::CheckCrossvalidate,
        Command::SolvePremium => Verb::SolvePremium,
    };
    let cfg = load(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let out_file = match &cli.command {
        Command::Simulate(a) => a.out.as_deref(),
        _ => None,
    };
    let outcome = cli::run(verb, &cfg, &out_dir, out_file)?;
    log::info!("{} artifacts in {}", outcome.artifacts.len(), out_dir.display());
    println!("{verb}: {}", outcome.summary);
    if outcome.status == ExitStatus::CheckFailed {
        eprintln!("{verb}: check failed; see {}", out_dir.join("failures.json").display());
    }
    Ok(outcome.status)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let status = match execute(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            ExitStatus::of_error(&e)
        }
    };
    ExitCode::from(status.code() as u8)
}
