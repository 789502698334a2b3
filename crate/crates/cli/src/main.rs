use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use chipletsim_cli::config::{validate, ConfigError};
use chipletsim_cli::pipeline::{parse_stages, write_calibration_csv, PipelineError, Stage, CALIBRATION_CSV};
use chipletsim_cli::{exit, load_config, reproduce, run_pipeline, RunConfig, CSV_SCHEMA};
use chipletsim_core::chiplet::{calibrate_lambda, CalibrationOptions};
use chipletsim_core::io::{fmt_f64, writer};
use chipletsim_core::spectra::{fit_lorentzian, read_spectrum_csv};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chipletsim",
    version,
    about = "Diamond micro-chiplet integration pipeline simulator"
)]
struct Cli {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo trials for yield, calibration and coverage.
    #[arg(long, global = true)]
    trials: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a comma-separated list of stages, or `all`.
    Run {
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Generate implantation spots.
    Implant,
    /// Couple spots to waveguides, calibrate density and tabulate yield.
    Yield,
    /// Calibrate the implant density to a target yield.
    Calibrate {
        #[arg(long)]
        target: Option<f64>,
    },
    /// Simulate pick-and-place assembly.
    Assemble,
    /// Synthesize and fit per-channel spectra.
    Spectra,
    /// Fit a Lorentzian to a spectrum CSV.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// Write the fit table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Plan strain tuning from the fitted line centres.
    Tune,
    /// Run everything and check the reproduction claims.
    Reproduce,
    /// Print the CSV output schema.
    Schema,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::UnknownStage(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<chipletsim_core::Error> for Failure {
    fn from(e: chipletsim_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = cli.trials {
        cfg.trials = trials;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    if let Command::Schema = cli.command {
        io::stdout().write_all(CSV_SCHEMA.as_bytes())?;
        return Ok(exit::OK);
    }
    let cfg = resolve_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }

    let stage = |s: Stage| -> Result<u8, Failure> {
        let m = run_pipeline(&cfg, &[s])?;
        report_files(&cfg, &m);
        Ok(exit::OK)
    };
    match &cli.command {
        Command::Run { stages } => {
            let m = run_pipeline(&cfg, &parse_stages(stages)?)?;
            report_files(&cfg, &m);
            Ok(exit::OK)
        }
        Command::Implant => stage(Stage::Implant),
        Command::Yield => stage(Stage::Chiplet),
        Command::Assemble => stage(Stage::Assembly),
        Command::Spectra => stage(Stage::Spectra),
        Command::Tune => stage(Stage::Tuning),
        Command::Calibrate { target } => {
            let target = target.or(cfg.chiplet.target_yield).unwrap_or(0.4);
            if !(target > 0.0 && target < 1.0) {
                return Err(Failure::Config(format!("--target: must be in (0, 1), got {target}")));
            }
            let opts = CalibrationOptions {
                trials: cfg.trials,
                ..CalibrationOptions::default()
            };
            let cal = calibrate_lambda(
                &cfg.design(),
                &cfg.implant_spec(),
                &cfg.alignment(),
                target,
                cfg.seed,
                &opts,
            )?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join(CALIBRATION_CSV);
            write_calibration_csv(File::create(&path)?, target, &cal)?;
            println!(
                "lambda = {} (yield {} ± {}, {} evaluations) -> {}",
                cal.lambda,
                cal.achieved.yield_fraction,
                cal.achieved.stderr,
                cal.evaluations,
                path.display()
            );
            Ok(exit::OK)
        }
        Command::Fit { input, output } => {
            let spectrum = read_spectrum_csv(BufReader::new(File::open(input)?))?;
            let fit = fit_lorentzian(&spectrum)?;
            let sink: Box<dyn Write> = match output {
                Some(path) => Box::new(File::create(path)?),
                None => Box::new(io::stdout().lock()),
            };
            let mut out = writer(sink, &["parameter", "value", "sigma"])?;
            for (name, e) in [
                ("center_mhz", fit.center_mhz),
                ("gamma_mhz", fit.gamma_mhz),
                ("amplitude", fit.amplitude),
                ("background", fit.background),
            ] {
                out.write_record([name.to_string(), fmt_f64(e.value), fmt_f64(e.sigma)])
                    .map_err(chipletsim_core::Error::from)?;
            }
            out.flush()?;
            Ok(if fit.converged { exit::OK } else { exit::RUNTIME })
        }
        Command::Reproduce => {
            let report = reproduce(&cfg)?;
            for c in &report.claims {
                println!(
                    "{} {}: reference {} simulated {} tolerance {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.id,
                    c.reference,
                    c.simulated,
                    c.tolerance
                );
            }
            Ok(if report.all_pass() {
                exit::OK
            } else {
                exit::CLAIM_FAILED
            })
        }
        Command::Schema => unreachable!(),
    }
}

fn report_files(cfg: &RunConfig, m: &chipletsim_cli::Manifest) {
    for f in &m.files {
        println!("{}  {}", f.sha256, cfg.output_dir.join(&f.path).display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(exit::CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(exit::RUNTIME)
        }
    }
}
