use clap::Parser;
use edlseg::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("edlseg: {err}");
        std::process::exit(exit_code(&err));
    }
}
