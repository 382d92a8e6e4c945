use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use hdekit::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match hdekit::run(&cli.command) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::from(4);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hdekit: {e:#}");
            ExitCode::from(hdekit::exit_code(&e))
        }
    }
}
