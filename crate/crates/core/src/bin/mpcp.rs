use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mpcp::cli::Cli::parse();
    let stdout = std::io::stdout();
    match mpcp::cli::execute(cli, &mut stdout.lock()) {
        Ok(status) => ExitCode::from(status.code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
