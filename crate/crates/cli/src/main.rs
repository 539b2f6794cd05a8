use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use isosle_cli::plot::{plot, PlotKind};
use isosle_cli::{run_path, Overrides};

#[derive(Parser)]
#[command(name = "isosle", version, about = "Loewner/SLE4 isomonodromy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON (or .toml) config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        paths: Option<usize>,
        /// Output directory, overriding `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a report CSV as SVG.
    Plot {
        csv: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Target file; defaults to the CSV path with an `.svg` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, seed, dt, paths, out } => match run_path(&config, &Overrides { seed, dt, paths, out }) {
            Ok(s) => {
                if !s.pass {
                    eprintln!("check failed; see {}", s.json.display());
                }
                s.exit_code()
            }
            Err(e) => {
                eprintln!("{e}");
                e.exit_code()
            }
        },
        Command::Plot { csv, kind, out } => {
            let out = out.unwrap_or_else(|| csv.with_extension("svg"));
            match plot(&csv, kind, &out) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("{e}");
                    e.exit_code()
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
