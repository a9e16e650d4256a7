use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = homesim::Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match homesim::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(homesim::exit_code(&e))
        }
    }
}
