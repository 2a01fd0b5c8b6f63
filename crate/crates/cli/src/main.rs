mod commands;
mod error;
mod opts;

use clap::Parser;

use crate::error::{config, CliResult};
use crate::opts::{resolve, BenchOpts, Cli, Command};

fn run(cli: Cli) -> CliResult<()> {
    let threads = match cli.threads {
        Some(0) => return Err(config("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| config(format!("thread pool: {e}")))?;
    let cfg = cli.config.as_deref();
    let name = cli.command.name();
    match &cli.command {
        Command::Distill(a) => commands::distill(&resolve(name, cfg, a, a.afs())?),
        Command::Rdpo(a) => commands::rdpo(&resolve(name, cfg, a, None)?),
        Command::Sample(a) => commands::sample(&resolve(name, cfg, a, None)?),
        Command::Compare(a) => commands::compare(&resolve(name, cfg, a, a.afs())?),
        Command::Bench(a) => {
            let mut o: BenchOpts = resolve(name, cfg, a, a.afs())?;
            o.threads = threads;
            commands::bench(&o)
        }
        Command::Analyze(a) => commands::analyze(&resolve(name, cfg, a, None)?),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
