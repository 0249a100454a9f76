use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(hyseg::cli::run())
}
