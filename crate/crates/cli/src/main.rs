use clap::Parser;

fn main() {
    let cli = lethe_cli::Cli::parse();
    if let Err(e) = lethe_cli::execute(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
