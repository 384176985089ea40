fn main() {
    std::process::exit(viewformer::cli::main_with_args(std::env::args_os()));
}
