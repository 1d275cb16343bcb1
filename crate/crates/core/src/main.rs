use clap::Parser;

fn main() {
    let cli = damsdan::cli::Cli::parse();
    if let Err(e) = damsdan::cli::run(cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(e.kind().exit_code());
    }
}
