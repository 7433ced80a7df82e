use std::process::ExitCode;

fn main() -> ExitCode {
    crpa::cli::main_with_args(std::env::args().collect())
}
