use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(rgbsde::cli::run() as u8)
}
