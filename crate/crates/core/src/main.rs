use clap::error::ErrorKind;
use clap::Parser;

use albuseg::cli::{execute, first_line, init_threads, Cli};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            eprintln!("error[usage]: {}", first_line(&e.to_string()));
            std::process::exit(2);
        }
    };
    if let Err(e) = init_threads().and_then(|_| execute(&cli, &args)) {
        eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
        std::process::exit(1);
    }
}
