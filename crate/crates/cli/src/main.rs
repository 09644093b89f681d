use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pathkernel_cli::{
    check_expectations, gradient_summary, load_config, profile, run_check, run_descent,
    run_gradient, run_simulate, run_sweep, write_json, CliError, ExperimentConfig, Result,
};

const THREADS_ENV: &str = "PATHKERNEL_THREADS";

#[derive(Parser)]
#[command(name = "pathkernel", version, about = "Path-kernel linear response experiments")]
struct Cli {
    /// TOML experiment file.
    #[arg(long, global = true, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Bundled profile: lorenz96-paper or ou-check.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Dotted override, e.g. --set estimator.alpha=3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output file; defaults to output.path, then stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; overrides PATHKERNEL_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one simulated orbit as CSV.
    Simulate {
        /// Ensemble member to simulate.
        #[arg(long, default_value_t = 0)]
        member: usize,
        /// Include the noise increments b_n.
        #[arg(long)]
        noise: bool,
    },
    /// Estimate the gradient of the averaged observable; writes JSON.
    Gradient,
    /// Gradient over the [sweep] grid; writes CSV.
    Sweep,
    /// Gradient iteration over the model parameters; writes CSV.
    Descend,
    /// Check model derivatives and the [check.expect] gradient values.
    Check,
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let text = match (&cli.config, &cli.profile) {
        (Some(path), _) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        (None, Some(name)) => profile(name)?.to_string(),
        (None, None) => return Err(CliError::Config("pass --config FILE or --profile NAME".into())),
    };
    load_config(&text, &cli.overrides)
}

fn output(cli: &Cli, cfg: &ExperimentConfig) -> Result<Box<dyn Write>> {
    Ok(match cli.out.as_ref().or(cfg.output.path.as_ref()) {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load(cli)?;
    match &cli.command {
        Command::Simulate { member, noise } => {
            let mut out = output(cli, &cfg)?;
            run_simulate(&cfg, *member, *noise, &mut out)?;
            out.flush()?;
        }
        Command::Gradient => {
            let report = run_gradient(&cfg)?;
            let mut out = output(cli, &cfg)?;
            write_json(&report, &mut out)?;
            out.flush()?;
            eprint!("{}", gradient_summary(&report));
            for line in check_expectations(&cfg, &report)? {
                eprintln!("  {line}");
            }
        }
        Command::Sweep => {
            let mut out = output(cli, &cfg)?;
            let failures = run_sweep(&cfg, &mut out)?;
            out.flush()?;
            if !failures.is_empty() {
                for (i, e) in &failures {
                    eprintln!("grid point {i} failed: {e}");
                }
                let total = cfg.sweep.as_ref().map_or(0, |s| s.axes.values().map(Vec::len).product());
                return Err(CliError::PartialSweep {
                    failed: failures.len(),
                    total,
                });
            }
        }
        Command::Descend => {
            let mut out = output(cli, &cfg)?;
            let status = run_descent(&cfg, &mut out)?;
            out.flush()?;
            eprintln!("descent stopped: {status:?}");
        }
        Command::Check => {
            for line in run_check(&cfg)? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
