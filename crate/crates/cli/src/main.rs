mod args;
mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliResult;

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Fit(a) => commands::fit(a, cli.verbose),
        Command::Density(a) => {
            let report = commands::density(a)?;
            for s in &report.models {
                println!("{:>4} {:.4}", s.model, s.mean_log_likelihood);
            }
            Ok(())
        }
        Command::Eval(a) => {
            let report = commands::eval(a)?;
            println!("{}", serde_json::to_string(&report).expect("metric report serializes"));
            Ok(())
        }
        Command::Benchmark(a) => commands::benchmark(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
