use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = sptx::Cli::parse();
    let mut out = std::io::stdout().lock();
    match sptx::run(cli, &mut out) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
