use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(resroute_cli::run(std::env::args_os()))
}
