use std::process::ExitCode;

fn main() -> ExitCode {
    sedmil::cli::run()
}
