use clap::Parser;

fn main() {
    let cli = tracewarp::cli::Cli::parse();
    if let Err(e) = tracewarp::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
