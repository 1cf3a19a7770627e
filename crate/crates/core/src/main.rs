fn main() {
    std::process::exit(deep_bayo::cli::main_with_args(std::env::args_os()));
}
