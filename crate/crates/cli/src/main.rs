use clap::Parser;
use mixpretrain_cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(f) = execute(cli) {
        eprintln!("error: {:#}", f.error);
        std::process::exit(f.code);
    }
}
