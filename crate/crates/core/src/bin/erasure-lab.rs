use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use erasure_lab::cli::{self, Command, ExperimentConfig, RunOptions, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "erasure-lab", version, about = "Concept-erasure experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate datasets for every (kappa, seed) cell.
    Gen(Common),
    /// Run INLP and write per-iteration traces.
    Inlp(Common),
    /// Adversarial removal at a single lambda.
    Adv(Common),
    /// Assumption and iff checks on generated or constructed instances.
    TheoryCheck(Common),
    /// Lambda sweep of adversarial removal.
    Sweep(Common),
    /// Plot-ready files and the acceptance table from earlier runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Exit with status 3 when any acceptance check fails.
        #[arg(long)]
        check: bool,
    },
}

fn main() -> ExitCode {
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let (cmd, common, check) = match args.command {
        Cmd::Gen(c) => (Command::Gen, c, false),
        Cmd::Inlp(c) => (Command::Inlp, c, false),
        Cmd::Adv(c) => (Command::Adv, c, false),
        Cmd::TheoryCheck(c) => (Command::TheoryCheck, c, false),
        Cmd::Sweep(c) => (Command::Sweep, c, false),
        Cmd::Report { common, check } => (Command::Report, common, check),
    };
    let cfg = match ExperimentConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Some(c) = cfg.command {
        if c != cmd {
            eprintln!("config error: config is for `{c}`, invoked as `{cmd}`");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    }
    let opts = RunOptions {
        out: common.out,
        workers: common.workers,
        seed_offset: common.seed_offset,
        check,
    };
    match cli::run(cmd, &cfg, &opts) {
        Ok(s) => {
            for f in &s.failures {
                eprintln!("cell failed: {f}");
            }
            if cmd == Command::Report {
                if let Ok(t) = std::fs::read_to_string(s.out.join("acceptance.txt")) {
                    print!("{t}");
                }
            }
            println!("{} files written to {}", s.files.len(), s.out.display());
            ExitCode::from(s.exit_code(check) as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
