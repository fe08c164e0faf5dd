fn main() {
    std::process::exit(pcnn::cli::main_with_args(std::env::args_os()));
}
