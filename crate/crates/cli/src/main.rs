mod args;
mod backend;
mod commands;
mod context;
mod error;
mod io;

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::sample::SampleArgs;
use context::Run;
use error::{CliError, CliResult};

fn dispatch(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => args::load_config(path)?,
        None => args::Knobs::default(),
    };
    let run = Run::new(cli.knobs.or(file))?;
    match &cli.command {
        Command::Mcl { samples } => commands::mcl::run(&run, samples),
        Command::Damcl { samples } => commands::damcl::run(&run, samples),
        Command::Detect { samples } => commands::detect::run(&run, samples),
        Command::Generate { prompts } => commands::generate::run(&run, prompts),
        Command::Bench => commands::bench::run(&run),
        Command::Score { input } => commands::score::run(&run, input),
        Command::Synth { kind } => commands::synth::run(&run, kind),
        Command::Sample {
            corpus,
            n_per_bucket,
            doc_window,
            no_ground_truth,
            token_cache,
            output,
        } => commands::sample::run(
            &run,
            SampleArgs {
                corpus,
                n_per_bucket: *n_per_bucket,
                doc_window: doc_window.as_deref(),
                ground_truth: !no_ground_truth,
                token_cache: token_cache.as_deref(),
                output: output.as_deref(),
            },
        ),
        Command::ServeMock { addr } => {
            let backend = run.backend_uncached()?;
            ctxlens_server::serve_blocking(addr, backend, Default::default())
                .map_err(|e| CliError::Backend(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_max_level(if cli.verbose { tracing::Level::INFO } else { tracing::Level::WARN })
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
