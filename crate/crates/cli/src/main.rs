// SPDX-License-Identifier: MIT OR Apache-2.0

mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Usage;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("SWEA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Usage(format!("SWEA_THREADS must be a positive integer, got {value:?}")))?;
    if n == 0 {
        return Err(Usage("SWEA_THREADS must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    init_threads()?;
    match &cli.command {
        Command::Corpus(a) => commands::corpus(a)?,
        Command::Train(a) => commands::train(a)?,
        Command::Edit(a) => commands::edit(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Attribute(a) => commands::attribute(a)?,
        Command::Sweep(a) => commands::sweep(a)?,
        Command::Replay(a) => return commands::replay(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: replayed outputs differ from the manifest");
            ExitCode::from(EXIT_FAILURE)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
