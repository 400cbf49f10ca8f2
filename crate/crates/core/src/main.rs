use std::io::Write;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

use bpconj::cli::{exit_code, run, Cli, Outcome};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    let result = run(&cli, &mut out);
    let flushed = out.flush().context("writing output");
    match (result, flushed) {
        (Ok(Outcome::Success), Ok(())) => ExitCode::SUCCESS,
        (Ok(Outcome::Failure), Ok(())) => ExitCode::from(1),
        (Err(err), _) => {
            let code = exit_code(&err);
            eprintln!("error: {err}");
            ExitCode::from(code)
        }
        (Ok(_), Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
