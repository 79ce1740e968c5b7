fn main() -> std::process::ExitCode {
    tactiforce::cli::main_with(std::env::args_os())
}
