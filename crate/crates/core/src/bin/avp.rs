use std::process::ExitCode;

fn main() -> ExitCode {
    avp_core::cli::main_from(std::env::args_os().collect())
}
