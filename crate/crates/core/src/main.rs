use clap::Parser;

use cohort_lte::cli::{error_exit_code, error_json, run, Cli};

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            error_exit_code(&e)
        }
    };
    std::process::exit(code);
}
