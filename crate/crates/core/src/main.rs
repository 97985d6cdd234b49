use clap::Parser;

fn main() {
    let cli = mixflow::cli::Cli::parse();
    if let Err(e) = mixflow::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
