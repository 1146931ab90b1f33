use clap::Parser;
use decorr_cli::Cli;

fn main() {
    if let Err(e) = decorr_cli::run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
