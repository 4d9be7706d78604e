use clap::Parser;

fn main() {
    std::process::exit(exitdpp_cli::run(exitdpp_cli::Cli::parse()));
}
