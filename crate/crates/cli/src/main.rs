use std::process::ExitCode;

use clap::Parser;

use selfie_cli::args::Cli;
use selfie_cli::commands::run;
use selfie_cli::config::RunConfig;
use selfie_cli::write_error;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let dir = cli
                .global
                .out
                .clone()
                .or_else(|| {
                    cli.global
                        .config
                        .as_deref()
                        .and_then(|p| RunConfig::load(p).ok())
                        .map(|c| c.out)
                })
                .unwrap_or_else(|| RunConfig::default().out);
            if let Err(w) = write_error(&dir, &e) {
                eprintln!("could not write error.json to {}: {w}", dir.display());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
