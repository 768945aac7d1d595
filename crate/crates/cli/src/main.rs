use clap::Parser;

use posedir_cli::cli::Cli;
use posedir_cli::commands;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
