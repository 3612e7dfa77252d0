fn main() {
    std::process::exit(lru_online::cli::main_with_args(std::env::args_os()));
}
