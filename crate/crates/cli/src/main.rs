use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    match commands::dispatch(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let text = e.to_string().replace('\n', "; ");
            let detail = text.strip_prefix(&format!("{category}: ")).unwrap_or(&text);
            eprintln!("error: {category}: {detail}");
            ExitCode::FAILURE
        }
    }
}
