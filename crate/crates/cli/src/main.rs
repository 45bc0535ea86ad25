use clap::Parser;
use patchmap_cli::args::Cli;

fn main() {
    if let Err(e) = patchmap_cli::run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
