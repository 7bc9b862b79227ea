use clap::Parser;
use pebsim::scenario::{cli_main, Cli};

fn main() {
    let cli = Cli::parse();
    std::process::exit(cli_main(&cli));
}
