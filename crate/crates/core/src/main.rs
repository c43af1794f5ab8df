fn main() -> std::process::ExitCode {
    drdos_detect::cli::main_with(std::env::args_os())
}
