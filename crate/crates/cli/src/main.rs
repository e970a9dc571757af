mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, SUBCOMMANDS};
use commands::Failure;

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: &Cli) -> commands::CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow::anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(anyhow::Error::from)?;
    }
    match &cli.command {
        Command::TrainEncoder(a) => commands::train_encoder(a),
        Command::TrainNnjm(a) => commands::train_nnjm_cmd(a),
        Command::Embed(a) => commands::embed(a),
        Command::Score(a) => commands::score(a),
        Command::Decode(a) => commands::decode(a),
        Command::Rescore(a) => commands::rescore(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::EvalRetrieval(a) => commands::eval_retrieval(a),
    }
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect(), &SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse_from(args);
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
