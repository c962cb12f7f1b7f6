mod args;
mod commands;
mod error;

use clap::error::ErrorKind;
use clap::Parser;

use crate::error::CliError;

fn main() {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return;
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.json_line());
            std::process::exit(err.exit_code());
        }
    };
    if let Err(err) = commands::run(cli) {
        eprintln!("error: {err}");
        eprintln!("{}", err.json_line());
        std::process::exit(err.exit_code());
    }
}
