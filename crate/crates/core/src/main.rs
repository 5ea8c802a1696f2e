use clap::Parser;

mod cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = cli::Cli::parse();
    if let Err(e) = cli::run(args) {
        eprintln!("spotlier: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
