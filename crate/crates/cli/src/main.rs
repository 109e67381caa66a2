use std::process::ExitCode;

use clap::Parser;

use aida_cli::cli::{run, Cli};

const LOG_LEVELS: [&str; 3] = ["error", "info", "debug"];

fn init_logging() {
    let level = std::env::var("AIDA_LOG_LEVEL").unwrap_or_default();
    let valid = LOG_LEVELS.contains(&level.as_str());
    env_logger::Builder::new().parse_filters(if valid { &level } else { "info" }).format_timestamp(None).init();
    if !level.is_empty() && !valid {
        log::warn!("AIDA_LOG_LEVEL={level} is not one of {LOG_LEVELS:?}; using info");
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
