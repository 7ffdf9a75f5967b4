use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match gsloc_cli::run(gsloc_cli::Cli::parse()) {
        Ok(m) => {
            for file in m.outputs.keys() {
                println!("wrote {file}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", gsloc_cli::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
