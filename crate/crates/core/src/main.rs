fn main() {
    std::process::exit(near_core::cli::main_with_args(std::env::args_os()));
}
