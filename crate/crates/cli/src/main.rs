mod args;
mod commands;
mod error;
mod pretty;
mod snapshot;

use clap::Parser;

use crate::args::Cli;
use crate::commands::{execute, Ctx};

fn main() {
    let cli = Cli::parse();
    let ctx = Ctx { pretty: cli.pretty };
    if let Err(e) = execute(cli.command, &ctx) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
