use std::process::ExitCode;

use clap::Parser;

use blockbert::Error;

mod commands;

/// Blockwise sparse attention toolkit: masks, equivalence audits, benchmarks,
/// memory regression, ablations, and toy MLM training.
#[derive(Parser)]
#[command(name = "blockbert", version)]
struct Cli {
    #[command(subcommand)]
    cmd: commands::Cmd,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Argument(_) | Error::Parse(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
