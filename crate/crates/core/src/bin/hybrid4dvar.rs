use std::process::ExitCode;

fn main() -> ExitCode {
    hybrid4dvar::cli::run(std::env::args_os())
}
