use std::process::ExitCode;

use clap::Parser;
use stgan_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line, machine-parseable
            let line = serde_json::json!({"error": e.kind(), "message": e.to_string().replace('\n', " ")});
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
