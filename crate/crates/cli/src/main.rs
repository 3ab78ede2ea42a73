use std::process::ExitCode;

use clap::Parser;

use wfsec_cli::{run, Cli, BUDGET_ENV};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage errors exit 1 so that 2 keeps meaning "violations".
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let env_budget = std::env::var(BUDGET_ENV).ok();
    match run(&cli, env_budget.as_deref(), &mut std::io::stdout().lock()) {
        Ok(outcome) => {
            if !outcome.summary.is_empty() {
                eprintln!("{}", outcome.summary);
            }
            ExitCode::from(outcome.status.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
