fn main() -> std::process::ExitCode {
    regime_lq_cli::run(std::env::args_os())
}
