mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use output::{CliError, Format};

/// Multilinear model toolkit: build, simulate, linearize and analyze CPN1 models.
#[derive(Parser, Debug)]
#[command(name = "mlstab", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Output format.
    #[arg(long, value_enum, global = true, default_value_t = Format::Table)]
    pub format: Format,
    /// Seed for randomized data generation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Write the main output here instead of stdout.
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Emit the model file of a named block.
    Block {
        /// Block name (`list` prints the known names).
        name: String,
        /// JSON parameter object; missing fields take their defaults.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Print the parameter object in use instead of the model.
        #[arg(long)]
        show_params: bool,
    },
    /// Stack models and connect signals with link equations.
    Compose {
        #[arg(required = true)]
        models: Vec<PathBuf>,
        /// Link `FROM:TO`; `TO` becomes an algebraic variable.
        #[arg(long = "link", value_name = "FROM:TO")]
        links: Vec<String>,
    },
    /// Structural summary of a model.
    Info { model: PathBuf },
    /// Random model (reproducible through --seed).
    Random {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 1)]
        p: usize,
        #[arg(long, default_value_t = 1)]
        q: usize,
        #[arg(long, default_value_t = 8)]
        r: usize,
        #[arg(long, default_value_t = 0.4)]
        density: f64,
    },
    /// Simulate a model from an initial point through a schedule of input steps.
    Simulate {
        model: PathBuf,
        /// Initial point `{names, values}`; unnamed signals start at zero.
        init: PathBuf,
        /// JSON list of `{t, signal, value}` events.
        schedule: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        t_start: f64,
        #[arg(long)]
        t_end: f64,
        #[arg(long)]
        max_step: Option<f64>,
        /// Use the initial point as is, without a consistency solve.
        #[arg(long)]
        no_init: bool,
        /// Tidy CSV with columns `time,signal,value`.
        #[arg(long)]
        long: bool,
    },
    /// Linear descriptor model of a model about an equilibrium.
    Linearize {
        model: PathBuf,
        point: PathBuf,
        /// Term-relative equilibrium tolerance.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Generalized eigenvalues and stability verdict of a descriptor model.
    Eig {
        ldss: PathBuf,
        /// Verdict tolerance; defaults to 1e-6 max(1, largest |λ|).
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Pair two eigenvalue sets.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Bound on the relative pair distance.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Run the three-bus benchmark.
    Bench {
        #[arg(value_enum)]
        case: BenchCase,
        /// Built-in scenario.
        #[arg(long, default_value = "small-step")]
        scenario: String,
        /// Scenario file; overrides --scenario.
        #[arg(long)]
        scenario_file: Option<PathBuf>,
        /// Benchmark parameters; r_load is solved for zero grid power unless given.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AssemblyArg::Full)]
        assembly: AssemblyArg,
        /// Write trajectories (long CSV) into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Spectrum of the benchmark over a range of active power references.
    Sweep {
        #[arg(long, default_value_t = 0.0)]
        from: f64,
        #[arg(long, default_value_t = 1.0)]
        to: f64,
        #[arg(long, default_value_t = 21)]
        points: usize,
        #[arg(long, value_enum, default_value_t = TargetArg::Both)]
        target: TargetArg,
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BenchCase {
    #[value(name = "3bus")]
    ThreeBus,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AssemblyArg {
    Full,
    GfmOnly,
    GflOnly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TargetArg {
    Both,
    Gfm,
    Gfl,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    mlstab::par::init_threads_from_env();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            output::report_error(&e, cli.global.format);
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}
