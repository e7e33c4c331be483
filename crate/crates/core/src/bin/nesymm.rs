use clap::Parser;

use nesymm::cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(text) => println!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
