use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use wsim_cli::commands;
use wsim_cli::config::{RunConfig, Units};
use wsim_cli::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UnitsArg {
    /// Dimensionless multiples of the reference coupling.
    G0,
    /// rad/s and seconds, rescaled by the config's g0_ref on load.
    Raw,
}

impl From<UnitsArg> for Units {
    fn from(u: UnitsArg) -> Self {
        match u {
            UnitsArg::G0 => Units::G0,
            UnitsArg::Raw => Units::Raw,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "wsim",
    version,
    about = "Simulate and optimize single-excitation transfer schedules, from the command line"
)]
struct Cli {
    /// JSON run configuration. Required by every subcommand except verify.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts (default: current directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for sweeps and multi-restart searches.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Interpret configuration numbers as raw rad/s or normalized units,
    /// overriding the config file's own declaration.
    #[arg(long, global = true, value_enum)]
    units: Option<UnitsArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the identity checks: spectrum, dark basis, frame antisymmetry,
    /// norm conservation, photon ledger, analytic-vs-numeric.
    Verify {
        /// Negative control: invert the reflected-field sign so the ledger
        /// check must fail.
        #[arg(long)]
        flip_io_sign: bool,
    },
    /// Search for coupling amplitudes; writes schedule.json and
    /// optimize_report.json.
    Optimize,
    /// Release a stored initial state through a schedule; writes the
    /// trajectory and the emitted pulse.
    Emit,
    /// Drive the optical port with a pulse file; writes the trajectory.
    Inject {
        /// Time-reverse (and conjugate) the pulse before injecting.
        #[arg(long)]
        reverse_pulse: bool,
        /// Run the schedule backwards.
        #[arg(long)]
        reverse_schedule: bool,
    },
    /// Emit each target, reverse, reinject, and report fidelities.
    Roundtrip,
    /// Fidelity curves against a damping rate or the schedule duration.
    Sweep,
}

fn load_resolved(cli: &Cli) -> CliResult<wsim_cli::config::Resolved> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("this command needs --config PATH"))?;
    let cfg = RunConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve(base, cli.units.map(Units::from), cli.seed)
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        // Ignore "already initialized": only possible when embedded in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));

    match &cli.command {
        Command::Verify { flip_io_sign } => {
            // Verify runs standalone; a config only contributes its seed.
            let seed = match (&cli.config, cli.seed) {
                (_, Some(s)) => s,
                (Some(path), None) => {
                    let cfg = RunConfig::load(path)?;
                    cfg.seed.unwrap_or(0)
                }
                (None, None) => 0,
            };
            commands::cmd_verify(seed, *flip_io_sign, &out)
        }
        Command::Optimize => commands::cmd_optimize(&load_resolved(cli)?, &out),
        Command::Emit => commands::cmd_emit(&load_resolved(cli)?, &out),
        Command::Inject {
            reverse_pulse,
            reverse_schedule,
        } => commands::cmd_inject(&load_resolved(cli)?, &out, *reverse_pulse, *reverse_schedule),
        Command::Roundtrip => commands::cmd_roundtrip(&load_resolved(cli)?, &out),
        Command::Sweep => commands::cmd_sweep(&load_resolved(cli)?, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
