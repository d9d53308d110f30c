fn main() {
    std::process::exit(pmffnn::cli::main_with_args(std::env::args_os()));
}
