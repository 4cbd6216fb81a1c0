use std::process::ExitCode;

fn main() -> ExitCode {
    let result = silocomm_cli::parse_config(std::env::args_os()).and_then(|cfg| silocomm_cli::execute(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(silocomm_cli::CliError::Usage(msg)) if is_info(&msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// `--help` and `--version` come back from clap as errors.
fn is_info(msg: &str) -> bool {
    msg.starts_with("Usage:") || msg.starts_with("Communication benchmarks") || msg.starts_with("bench ")
}
