use aga_cli::commands::{run, Cli};
use clap::Parser;

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if aga_cli::is_usage_error(&err) { 2 } else { 1 };
            std::process::exit(code);
        }
    }
}
