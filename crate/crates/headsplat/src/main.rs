use clap::Parser;

fn main() {
    let cli = headsplat::cli::Cli::parse();
    if let Err(e) = headsplat::cli::run(cli) {
        eprintln!("{}", e.message);
        std::process::exit(e.code);
    }
}
