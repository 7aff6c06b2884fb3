use std::process::ExitCode;

use clap::Parser;
use fewgraph_cli::{execute, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEWGRAPH_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string();
            let mut lines = msg.lines();
            eprintln!("fewgraph: {}", lines.next().unwrap_or("error"));
            for l in lines {
                eprintln!("{l}");
            }
            ExitCode::from(2)
        }
    }
}
