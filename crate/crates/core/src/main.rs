use clap::Parser;

fn main() {
    std::process::exit(lel::cli::run(lel::cli::Cli::parse()));
}
