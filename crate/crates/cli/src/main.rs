use std::process::ExitCode;

use clap::Parser;
use postcast_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("postcast {}: error {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
