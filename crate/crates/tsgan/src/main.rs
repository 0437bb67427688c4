use std::process::ExitCode;

fn main() -> ExitCode {
    let env = env_logger::Env::new().filter_or(tsgan::cli::LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
    ExitCode::from(tsgan::cli::run(std::env::args_os()))
}
