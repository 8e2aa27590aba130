use clap::Parser;

fn main() {
    std::process::exit(fedsv_cli::execute(fedsv_cli::Cli::parse()));
}
