use clap::Parser;

fn main() {
    let cli = sparselab::cli::Cli::parse();
    if let Err(e) = sparselab::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
