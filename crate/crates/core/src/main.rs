use std::process::ExitCode;

use clap::Parser;

mod cli;

use cli::{Cli, Command};

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match args.command {
        Command::GenData(a) => cli::gen_data(a),
        Command::Train(a) => cli::train(a),
        Command::Eval(a) => cli::eval(a),
        Command::ExportPlot(a) => cli::export_plot(a),
        Command::GradCheck(a) => cli::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(cli::exit_code(&e))
        }
    }
}
