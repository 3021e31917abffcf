use std::process::ExitCode;

fn main() -> ExitCode {
    uniwrv::cli::run()
}
