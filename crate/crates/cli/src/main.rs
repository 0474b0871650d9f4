mod args;
mod commands;
mod failure;
mod reports;
mod run;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use failure::CliResult;

fn dispatch(cli: Cli) -> CliResult<()> {
    commands::configure_threads()?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on malformed flags.
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
