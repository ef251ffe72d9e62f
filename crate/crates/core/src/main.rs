fn main() {
    std::process::exit(laenet::cli::main_with_args(std::env::args_os()));
}
