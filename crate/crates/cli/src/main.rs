//! `locc`: build, simulate and analyse nonlocal-gate protocols.

mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{BuiltinGate, CliffordGate, ExportRequest, GateSource, SimulateOptions};
use error::CliError;
use output::{Format, Report};

#[derive(Debug, Parser)]
#[command(name = "locc", version, about = "Simulate and analyse LOCC protocols for nonlocal two-party gates")]
struct Cli {
    #[arg(long, value_enum, default_value_t = Format::Json, global = true)]
    format: Format,

    /// Output file; relative paths are resolved against $LOCC_OUTPUT_DIR when set.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    /// Seed for random test inputs.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a protocol and run it exhaustively on random purified inputs.
    Simulate {
        #[command(subcommand)]
        gate: SimulateGate,
    },
    /// Expected cost of the three-round protocol over a θ grid, plus the threshold.
    CostCurve {
        #[arg(long, default_value_t = 0.01, allow_negative_numbers = true)]
        theta_min: f64,
        #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2, allow_negative_numbers = true)]
        theta_max: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Allowed |Ē − 1| at the threshold.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Markovianizing cost of a builtin gate or a unitary read from JSON.
    MarkovCost {
        #[arg(value_enum, required_unless_present = "matrix", conflicts_with = "matrix")]
        gate: Option<BuiltinGate>,
        #[arg(long, allow_negative_numbers = true)]
        theta: Option<f64>,
        /// JSON file with fields rows, cols, re, im (row-major).
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Typical-set weight and error bounds of the n-shot protocol.
    Typicality {
        #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
        delta: f64,
        #[arg(long = "n", value_delimiter = ',', default_values_t = commands::DEFAULT_N_LIST)]
        ns: Vec<usize>,
        /// Source distribution instead of the one induced by θ, as p0,p1.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Also sum the typical weight over all 2^n sequences (n ≤ 20).
        #[arg(long)]
        enumerate: bool,
    },
    /// Dump a protocol program as JSON.
    ExportProtocol {
        #[command(subcommand)]
        protocol: ExportProtocol,
    },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Number of random inputs.
    #[arg(long, default_value_t = 8)]
    inputs: usize,
    /// Largest accepted error; defaults to 1e-9 for u-theta, 1e-10 for clifford.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Dimension of the purifying reference system.
    #[arg(long)]
    referee_dim: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum SimulateGate {
    /// The three-round protocol for U_θ.
    UTheta {
        #[arg(long, allow_negative_numbers = true)]
        theta: f64,
        /// Resource angle; defaults to √θ.
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        /// Prepare the resource from a shared Bell pair first.
        #[arg(long)]
        dilution: bool,
        #[command(flatten)]
        args: SimulateArgs,
    },
    /// The one-round protocol for a Clifford gate.
    Clifford {
        #[arg(long, value_enum)]
        gate: CliffordGate,
        #[command(flatten)]
        args: SimulateArgs,
    },
}

#[derive(Debug, Subcommand)]
enum ExportProtocol {
    UTheta {
        #[arg(long, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        #[arg(long)]
        dilution: bool,
    },
    P1 {
        #[arg(long, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long, allow_negative_numbers = true)]
        alpha: f64,
    },
    P2 {
        #[arg(long, allow_negative_numbers = true)]
        phi: f64,
    },
    Clifford {
        #[arg(long, value_enum)]
        gate: CliffordGate,
    },
    Dilution {
        /// Target Schmidt weights, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        target: Vec<f64>,
        /// Number of shared Bell pairs.
        #[arg(long)]
        k: u32,
    },
    NShot {
        #[arg(long, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, allow_negative_numbers = true)]
        delta: f64,
    },
}

fn emit<R: Report>(report: &R, cli: &Cli) -> Result<bool, CliError> {
    let text = output::render(report, cli.format)?;
    output::write_output(&text, cli.output.as_deref())?;
    Ok(report.passed())
}

fn simulate_options(args: &SimulateArgs, seed: u64) -> SimulateOptions {
    SimulateOptions { inputs: args.inputs, seed, tolerance: args.tolerance, referee_dim: args.referee_dim }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    match &cli.command {
        Command::Simulate { gate } => match gate {
            SimulateGate::UTheta { theta, alpha, dilution, args } => emit(
                &commands::simulate_u_theta(*theta, *alpha, *dilution, simulate_options(args, cli.seed))?,
                cli,
            ),
            SimulateGate::Clifford { gate, args } => {
                emit(&commands::simulate_clifford(*gate, simulate_options(args, cli.seed))?, cli)
            }
        },
        Command::CostCurve { theta_min, theta_max, steps, tolerance } => {
            emit(&commands::cost_curve(*theta_min, *theta_max, *steps, *tolerance)?, cli)
        }
        Command::MarkovCost { gate, theta, matrix } => {
            let source = match (gate, matrix) {
                (_, Some(path)) => GateSource::File(path),
                (Some(g), None) => GateSource::Builtin(*g, *theta),
                (None, None) => return Err(CliError::Usage("give a builtin gate or --matrix".into())),
            };
            emit(&commands::markov_cost(source)?, cli)
        }
        Command::Typicality { theta, delta, ns, lambda, enumerate } => {
            let lambda = match lambda.as_deref() {
                None => None,
                Some(&[p0, p1]) => Some([p0, p1]),
                Some(_) => return Err(CliError::Usage("--lambda takes two weights p0,p1".into())),
            };
            emit(&commands::typicality(*theta, *delta, ns, lambda, *enumerate)?, cli)
        }
        Command::ExportProtocol { protocol } => {
            let request = match protocol {
                ExportProtocol::UTheta { theta, alpha, dilution } => {
                    ExportRequest::UTheta { theta: *theta, alpha: *alpha, dilution: *dilution }
                }
                ExportProtocol::P1 { theta, alpha } => ExportRequest::P1 { theta: *theta, alpha: *alpha },
                ExportProtocol::P2 { phi } => ExportRequest::P2 { phi: *phi },
                ExportProtocol::Clifford { gate } => ExportRequest::Clifford(*gate),
                ExportProtocol::Dilution { target, k } => ExportRequest::Dilution { target: target.clone(), k: *k },
                ExportProtocol::NShot { theta, n, delta } => {
                    ExportRequest::NShot { theta: *theta, n: *n, delta: *delta }
                }
            };
            emit(&commands::export(request)?, cli)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("locc: tolerance check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("locc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
