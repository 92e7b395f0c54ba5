fn main() -> std::process::ExitCode {
    avp_core::cli::main_as("rsu")
}
