use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use sphattn::harness::{self, config, emit_report, Experiment, ExperimentConfig, Format};
use sphattn::target::{gen_dataset, make_target_multi, write_dataset, DatasetMeta};
use sphattn::Error;

#[derive(Parser)]
#[command(name = "sphattn", version, about = "Channel selection and gradient-descent experiments for spherical-harmonic attention networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file: flat `key = value` lines or JSON (a previous report also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides `base_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file; overrides `output_path`. Without one the report goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format; defaults to csv for `.csv` paths and json otherwise.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Override any config key, e.g. `--set n=500,1000 --set sigma0=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Repeated one-step channel selection.
    Select,
    /// Gradient-descent training with Monte Carlo risk.
    Train,
    /// Training over an n grid with a log-log risk fit.
    RiskSweep,
    /// Empirical-kernel error over an m grid.
    KernelConv,
    /// Calibrate the selection threshold from raw channel weights.
    CalibrateEps0,
    /// Kernel complexity curves and critical radii.
    ComplexityCurve,
    /// Write a synthetic dataset as CSV with a JSON sidecar.
    GenData,
}

impl Command {
    fn experiment(self) -> Option<Experiment> {
        Some(match self {
            Command::Select => Experiment::Select,
            Command::Train => Experiment::Train,
            Command::RiskSweep => Experiment::RiskSweep,
            Command::KernelConv => Experiment::KernelConv,
            Command::CalibrateEps0 => Experiment::CalibrateEps0,
            Command::ComplexityCurve => Experiment::ComplexityCurve,
            Command::GenData => return None,
        })
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut overrides = Vec::new();
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), config::parse_value(v)));
    }
    if let Some(s) = c.seed {
        overrides.push(("base_seed".into(), s.into()));
    }
    let mut cfg = ExperimentConfig::load(c.config.as_deref(), &overrides)?;
    if let Some(out) = &c.out {
        cfg.output_path = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = load_config(&cli.common)?;
    if let Some(t) = cli.common.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        sphattn::set_threads(t);
    }
    let Some(experiment) = cli.command.experiment() else {
        let path = cfg
            .output_path
            .clone()
            .ok_or_else(|| Error::Config("gen-data needs --out".into()))?;
        let target = make_target_multi(cfg.d, cfg.ell0, &cfg.coeffs, cfg.directions_per_degree, cfg.base_seed)?;
        let data = gen_dataset(&target, cfg.n[0], cfg.sigma0, cfg.base_seed)?;
        write_dataset(&path, &data, &DatasetMeta::new(&target, cfg.sigma0, cfg.base_seed))?;
        return Ok(ExitCode::SUCCESS);
    };

    let start = Instant::now();
    let report = harness::run(experiment, &cfg)?;
    eprintln!(
        "{}: {} trials, {} failed, {:.2}s",
        experiment.name(),
        report.aggregates.trials,
        report.aggregates.failures,
        start.elapsed().as_secs_f64()
    );

    let format = match &cli.common.format {
        Some(f) => f.parse::<Format>()?,
        None => match cfg.output_path.as_ref().and_then(|p| p.extension()) {
            Some(ext) if ext == "csv" => Format::Csv,
            _ => Format::Json,
        },
    };
    match &cfg.output_path {
        Some(path) => emit_report(&report, path, format)?,
        None if format == Format::Json => print!("{}", report.to_json()),
        None => return Err(Error::Config("csv output needs --out".into())),
    }
    if report.all_numerical_failures() {
        eprintln!("every trial failed numerically");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                e if e.is_numerical() => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
