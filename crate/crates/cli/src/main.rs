fn main() {
    std::process::exit(hvx_cli::main_with_args(std::env::args_os()));
}
