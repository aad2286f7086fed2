use clap::Parser;
use hilo_gateway::cli::{run_command, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run_command(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
