use std::process::ExitCode;

use clap::Parser;
use ctrisk::cli::{error_json, run_command, Cli, RunConfig};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = RunConfig::from_cli(Cli::parse()).and_then(|cfg| {
        if let Some(n) = cfg.options.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| ctrisk::Error::InvalidParameter(format!("cannot configure {n} threads: {e}")))?;
        }
        run_command(&cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
