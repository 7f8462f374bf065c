fn main() -> std::process::ExitCode {
    scb_detr::cli::main_with(std::env::args_os())
}
