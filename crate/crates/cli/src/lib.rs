//! The `coldselect` command line: prepare, select, eval, simulate, serve.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};

use clap::{Parser, Subcommand};

use crate::commands::{EvalArgs, SelectArgs, ServeArgs, SimulateArgs};
use crate::config::ConfigArgs;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "coldselect", version, about = "Cold-start instance and verbalizer selection")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project embeddings into the shared space and cluster them.
    Prepare,
    /// Run oracle-mode selection sessions from a gold file.
    Select(SelectArgs),
    /// Score a session's verbalizers on held-out instances.
    Eval(EvalArgs),
    /// Compare strategies on synthetic corpora.
    Simulate(SimulateArgs),
    /// Serve an interactive annotation session over HTTP.
    Serve(ServeArgs),
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = cli.config.resolve()?;
    match &cli.command {
        Command::Prepare => {
            let m = commands::prepare(&config)?;
            println!(
                "{} tokens, {} instances, {} clusters ({} tokens discarded) -> {}",
                m.summary.tokens,
                m.summary.instances,
                m.summary.clusters,
                m.summary.discarded_tokens,
                config.output_dir.display()
            );
        }
        Command::Select(args) => {
            let out = commands::select(&config, args)?;
            for p in &out.exports {
                println!("export: {}", p.display());
            }
            if let Some(p) = out.results {
                println!("results: {}", p.display());
            }
        }
        Command::Eval(args) => {
            let (report, json, text) = commands::eval(&config, args)?;
            print!("{}", coldselect::verbalizer_eval::render_text(&report));
            println!("reports: {} {}", json.display(), text.display());
        }
        Command::Simulate(args) => {
            let path = commands::simulate(&config, args)?;
            println!("results: {}", path.display());
        }
        Command::Serve(args) => commands::serve(&config, args)?,
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match catch_unwind(AssertUnwindSafe(|| dispatch(&cli))) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => {
            let e = CliError::Internal("unexpected panic".into());
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
