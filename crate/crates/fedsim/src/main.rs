use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsim::commands::{compare, run_experiment, selftest, ConfigSource};
use fedsim::exec::ThreadPool;
use fedsim::Result;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run several experiments on the same data and tabulate them.
    Compare {
        /// Config file; repeat for each run.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Check numerical invariants of the build.
    Selftest,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override a config key, e.g. `--set local.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for client updates.
    #[arg(long, env = "FEDSIM_THREADS")]
    threads: Option<usize>,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(command: Command) -> Result<u8> {
    match command {
        Command::Run { config, common } => {
            let source = ConfigSource::load(&config, &common.set, common.seed)?;
            let pool = ThreadPool::new(common.threads)?;
            let s = run_experiment(&source, &common.out, &pool)?;
            println!(
                "{}: {} rounds, test accuracy {:.4} (smoothed {:.4}), outputs in {}",
                s.algorithm,
                s.rounds,
                s.final_test_accuracy,
                s.final_ema_accuracy,
                common.out.display()
            );
            Ok(0)
        }
        Command::Compare { config, common } => {
            let sources =
                config.iter().map(|p| ConfigSource::load(p, &common.set, common.seed)).collect::<Result<Vec<_>>>()?;
            let pool = ThreadPool::new(common.threads)?;
            let summaries = compare(&sources, &common.out, &pool)?;
            for (src, s) in sources.iter().zip(&summaries) {
                println!("{} ({}): smoothed accuracy {:.4}", src.label(), s.algorithm, s.final_ema_accuracy);
            }
            println!("comparison written to {}", common.out.join("comparison.csv").display());
            Ok(0)
        }
        Command::Selftest => {
            let failed = selftest(&mut std::io::stdout().lock()).map_err(|source| fedsim::Error::Write {
                path: PathBuf::from("<stdout>"),
                source,
            })?;
            Ok(u8::from(!failed.is_empty()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
