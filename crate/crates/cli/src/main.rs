use std::process::ExitCode;

fn main() -> ExitCode {
    fgs_cli::run(std::env::args_os())
}
