use std::process::ExitCode;

fn main() -> ExitCode {
    dq::cli::run_from(std::env::args_os())
}
