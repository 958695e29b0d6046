use clap::Parser;

fn main() {
    let cli = anoclass::cli::Cli::parse();
    if let Err(e) = anoclass::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
