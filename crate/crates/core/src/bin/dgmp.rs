use clap::Parser;
use dgmp::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    let result = cli::init_threads().and_then(|_| cli::run(args));
    if let Err(e) = result {
        eprintln!("dgmp: {e}");
        std::process::exit(e.exit_code());
    }
}
