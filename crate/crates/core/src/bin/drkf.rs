use std::process::ExitCode;

fn main() -> ExitCode {
    drkf::cli::run_from(std::env::args_os())
}
