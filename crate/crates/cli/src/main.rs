use clap::Parser;

use neurok_cli::{error_record, exit_code, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    if let Err(e) = run(cli) {
        eprintln!("{}", error_record(name, &e));
        std::process::exit(exit_code(&e));
    }
}
