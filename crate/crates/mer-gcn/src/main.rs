use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mer_gcn::cli::Cli::parse();
    match mer_gcn::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
