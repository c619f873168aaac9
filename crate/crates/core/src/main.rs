fn main() {
    std::process::exit(brainage::cli::main_with_args(std::env::args_os()));
}
