//! `subpop`: synthesize data, train and evaluate group-robust adapters, and
//! aggregate repeated runs into comparison tables.
//!
//! `subpop --manifest RUN/manifest.txt [overrides...]` reruns a recorded
//! command; later flags override the recorded ones.

mod args;
mod commands;
mod data;
mod error;
mod manifest;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::{CliError, Result};

/// Expands a leading `--manifest FILE` into the recorded command line.
fn expand_manifest(raw: Vec<String>) -> Result<Vec<String>> {
    let (path, rest) = match raw.get(1).map(String::as_str) {
        Some("--manifest") => match raw.get(2) {
            Some(p) => (p.clone(), 3),
            None => return Err(CliError::Manifest("--manifest needs a file".into())),
        },
        Some(a) if a.starts_with("--manifest=") => (a["--manifest=".len()..].to_string(), 2),
        _ => return Ok(raw),
    };
    let recorded = manifest::read(std::path::Path::new(&path))?;
    let mut argv = vec![raw[0].clone()];
    argv.extend(recorded.to_args());
    argv.extend(raw[rest..].iter().cloned());
    Ok(argv)
}

fn run(cli: &Cli) -> Result<()> {
    let pairs = cli.command.pairs();
    let hash = manifest::config_hash(cli.command.name(), &pairs);
    match &cli.command {
        Command::Synth(a) => commands::synth(a, &pairs, &hash),
        Command::Train(a) => commands::train(a, &pairs, &hash),
        Command::Eval(a) => commands::eval(a, &pairs, &hash),
        Command::Sweep(a) => commands::sweep(a, &pairs, &hash),
        Command::Select(a) => report::select(a, &pairs, &hash),
        Command::Report(a) => report::report(a, &pairs, &hash),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let msg = e.to_string().replace(['\n', '\t'], " ");
    eprintln!("error\t{}\t{msg}", e.kind());
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let argv = match expand_manifest(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    let cli = Cli::try_parse_from(argv).unwrap_or_else(|e| e.exit());
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
