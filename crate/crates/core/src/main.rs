use std::process::ExitCode;

fn main() -> ExitCode {
    depthflow::cli::run(std::env::args_os())
}
