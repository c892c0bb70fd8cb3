use clap::Parser;

use sgad::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("sgad: {e}");
        std::process::exit(exit_code(&e));
    }
}
