use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KGFORGE_LOG", "warn")).init();
    kgforge::cli::main_with_args(std::env::args_os())
}
