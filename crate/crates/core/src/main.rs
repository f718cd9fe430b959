fn main() {
    std::process::exit(adaptdet::cli::main_with_args(std::env::args_os()));
}
