use std::process::ExitCode;

fn main() -> ExitCode {
    cks::cli::run_from(std::env::args_os())
}
