mod args;
mod commands;
mod error;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use osr_ebm::Execution;

use args::{Cli, Command};
use commands::Ctx;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out.clone(),
        config: cli.config.clone(),
        quiet: cli.quiet,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
    };
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Sample(a) => commands::sample(&ctx, a),
        Command::Ablate(a) => commands::ablate(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
