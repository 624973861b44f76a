use clap::Parser;

fn main() {
    let cli = doge_cli::Cli::parse();
    match doge_cli::run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
