fn main() -> std::process::ExitCode {
    mitodiff_cli::main_with_args(std::env::args_os())
}
