fn main() {
    std::process::exit(ara::cli::main_with_args(std::env::args_os()));
}
