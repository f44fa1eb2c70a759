use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(eac::cli::main(std::env::args_os()))
}
