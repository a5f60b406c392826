use clap::Parser;
use harmcloud::cli::{report, run, Cli};

fn main() {
    let cli = Cli::parse();
    let output = cli.output;
    if let Err(f) = run(cli) {
        std::process::exit(report(&f, output));
    }
}
