use clap::Parser;
use hazmark::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("hazmark: {e}");
        std::process::exit(exit_code(&e));
    }
}
