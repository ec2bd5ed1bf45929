use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = rner_cli::Cli::parse();
    match rner_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}
