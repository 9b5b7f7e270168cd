fn main() {
    std::process::exit(causalq::cli::main_with_args(std::env::args_os()));
}
