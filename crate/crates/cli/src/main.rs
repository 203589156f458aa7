use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smib_cli::{cmd_linearize, cmd_rootlocus, cmd_simulate, cmd_validate, cmd_zeros, CliError, Options};

/// Small-signal, zero and time-domain analysis of a synchronous machine
/// connected to an infinite bus.
#[derive(Parser)]
#[command(name = "smib", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Override the AVR gain K_A.
    #[arg(long, global = true)]
    ka: Option<f64>,
    /// Output directory (default: `[output] dir` of the scenario).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent sweep points.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    gain_min: Option<f64>,
    #[arg(long, global = true)]
    gain_max: Option<f64>,
    #[arg(long, global = true)]
    gain_points: Option<usize>,
    /// Integration step (s).
    #[arg(long, global = true)]
    step: Option<f64>,
    /// Simulated time (s).
    #[arg(long, global = true)]
    horizon: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Operating point, state-space model, eigenvalues and stability conditions.
    Linearize { file: PathBuf },
    /// Closed-form and numeric zeros of the control loops.
    Zeros {
        file: PathBuf,
        /// Restrict to one loop, e.g. `theta2_P3`.
        #[arg(long = "loop")]
        loop_id: Option<String>,
    },
    /// Residue-tuned POD controller and its root locus.
    Rootlocus {
        file: PathBuf,
        #[arg(long)]
        bus: Option<String>,
    },
    /// Event simulation of the configured control variants.
    Simulate {
        file: PathBuf,
        /// Also search the first-swing critical clearing time.
        #[arg(long)]
        cct: bool,
    },
    /// Cross-checks between independent computations.
    Validate {
        file: PathBuf,
        #[arg(long, hide = true)]
        inject_a31_flip: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    if let Some(n) = g.jobs {
        if n == 0 {
            return Err(CliError::Input("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Numeric(format!("thread pool: {e}")))?;
    }
    let mut opts = Options {
        k_a: g.ka,
        out: g.out,
        gain_min: g.gain_min,
        gain_max: g.gain_max,
        gain_points: g.gain_points,
        step: g.step,
        horizon: g.horizon,
        ..Options::default()
    };
    let written = match cli.command {
        Command::Linearize { file } => cmd_linearize(&file, &opts)?,
        Command::Zeros { file, loop_id } => {
            opts.loop_id = loop_id;
            cmd_zeros(&file, &opts)?
        }
        Command::Rootlocus { file, bus } => {
            opts.bus = bus;
            cmd_rootlocus(&file, &opts)?
        }
        Command::Simulate { file, cct } => {
            opts.cct = cct;
            cmd_simulate(&file, &opts)?
        }
        Command::Validate { file, inject_a31_flip } => {
            opts.inject_a31_flip = inject_a31_flip;
            let (written, report) = cmd_validate(&file, &opts)?;
            for c in &report.checks {
                println!("{:<36} {:>12.3e} <= {:<8.0e} {}", c.name, c.value, c.tolerance, if c.pass { "pass" } else { "FAIL" });
            }
            for p in &written {
                println!("wrote {}", p.display());
            }
            let failed = report.checks.iter().filter(|c| !c.pass).count();
            return if failed == 0 { Ok(()) } else { Err(CliError::ChecksFailed(failed)) };
        }
    };
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
