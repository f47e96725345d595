use clap::Parser;

use nsi_core::cli::{error_payload, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
        }
        Err(e) => {
            eprintln!("{}", error_payload(&e));
            std::process::exit(e.exit_code());
        }
    }
}
