use clap::Parser;
use gne_active::cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GNE_LOG_LEVEL", "warn")).init();
    std::process::exit(execute(Cli::parse()));
}
