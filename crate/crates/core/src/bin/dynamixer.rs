fn main() {
    std::process::exit(dynamixer::cli::main_with_args(std::env::args_os()));
}
