use std::path::PathBuf;
use std::process::ExitCode;

use adverse_nc::solver::Mode;
use adverse_nc_cli::{report, run, Overrides, RunConfig, EXIT_PARSE};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adverse-nc", version, about = "Necessary-condition solver for adverse optimal control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Relaxed,
    Hyperrelaxed,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, solve the j-sweep and write artifacts.
    Run {
        /// Problem file (JSON).
        problem: PathBuf,
        /// Run configuration (JSON); flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Comma-separated, strictly increasing mollification indices.
        #[arg(long, value_delimiter = ',')]
        j: Option<Vec<u32>>,
        #[arg(long)]
        steps: Option<usize>,
        /// Frank–Wolfe gap tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a certificate.
    Report { certificate: PathBuf },
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { problem, config, mode, j, steps, tol, seed, out } => {
            let overrides = Overrides {
                mode: mode.map(|m| match m {
                    ModeArg::Relaxed => Mode::Relaxed,
                    ModeArg::Hyperrelaxed => Mode::Hyperrelaxed,
                }),
                j_sequence: j,
                n_steps: steps,
                tol,
                seed,
                out,
            };
            let cfg = match RunConfig::load(config.as_deref(), &overrides) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return exit(EXIT_PARSE);
                }
            };
            let outcome = run(&problem, &cfg);
            if outcome.code == 0 {
                println!("{}", outcome.message);
            } else {
                eprintln!("{}", outcome.message);
            }
            exit(outcome.code)
        }
        Command::Report { certificate } => {
            let (code, text) = report(&certificate);
            if code == EXIT_PARSE {
                eprintln!("error: {text}");
            } else {
                print!("{text}");
            }
            exit(code)
        }
    }
}
