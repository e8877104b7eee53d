//! `iondet` command-line frontend.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "iondet",
    version,
    about = "Ion detector and coincidence calibration simulator"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration. Defaults are used for anything not given.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config. Drawn at random if neither sets it.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Fail instead of solving when the field cache is missing.
    #[arg(long, global = true)]
    pub no_solve: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve (or load) the field basis and export the assembly.
    Solve,
    /// Trace single ions through the optics.
    Trace(commands::TraceArgs),
    /// Detection probability over a lattice of birth points.
    Map(commands::MapArgs),
    /// Electron-ion delay spectrum of a calibration run, with the peak fit.
    Spectrum,
    /// Full coincidence calibration run.
    Calibrate,
    /// Parameter scans.
    Scan(ScanArgs),
    /// Pulsed time-of-flight mass spectrum.
    Tof,
    /// Parse and check a configuration without running anything.
    ValidateConfig(commands::ValidateArgs),
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[arg(value_enum)]
    kind: ScanKind,
    /// Keep the configured voltage ratios at every extraction voltage
    /// instead of re-optimizing them.
    #[arg(long)]
    no_reoptimize: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ScanKind {
    /// Detection rate against the extraction voltage.
    Ue,
    /// Detection rate against the tube ratio.
    Ratio,
    /// Detection rate over the tube/deflection ratio plane.
    Plane,
    /// Calibrated efficiency against the CEM bias.
    Cemv,
}

impl ScanKind {
    pub fn name(self) -> &'static str {
        match self {
            ScanKind::Ue => "ue",
            ScanKind::Ratio => "ratio",
            ScanKind::Plane => "plane",
            ScanKind::Cemv => "cemv",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ValidateConfig(a) => commands::validate_config(&cli.global, &a),
        cmd => run(&cli.global, cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(global: &GlobalArgs, cmd: Command) -> anyhow::Result<()> {
    if let Some(n) = global.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (name, args) = match &cmd {
        Command::Solve => ("solve".to_string(), Vec::new()),
        Command::Trace(a) => ("trace".into(), a.describe()),
        Command::Map(a) => ("map".into(), a.describe()),
        Command::Spectrum => ("spectrum".into(), Vec::new()),
        Command::Calibrate => ("calibrate".into(), Vec::new()),
        Command::Scan(a) => (
            format!("scan-{}", a.kind.name()),
            if a.no_reoptimize {
                vec!["--no-reoptimize".into()]
            } else {
                Vec::new()
            },
        ),
        Command::Tof => ("tof".into(), Vec::new()),
        Command::ValidateConfig(_) => unreachable!(),
    };
    let mut run = commands::Run::start(global, &name, args)?;
    match cmd {
        Command::Solve => commands::solve(&mut run)?,
        Command::Trace(a) => commands::trace(&mut run, &a)?,
        Command::Map(a) => commands::map(&mut run, &a)?,
        Command::Spectrum => commands::spectrum(&mut run)?,
        Command::Calibrate => commands::calibrate(&mut run)?,
        Command::Scan(a) => commands::scan(&mut run, a.kind, !a.no_reoptimize)?,
        Command::Tof => commands::tof(&mut run)?,
        Command::ValidateConfig(_) => unreachable!(),
    }
    let manifest = run.finish()?;
    println!("{}", manifest.display());
    Ok(())
}
