use std::process::ExitCode;

fn main() -> ExitCode {
    splitguard::cli::main_with_args(std::env::args_os())
}
