fn main() {
    std::process::exit(cara::cli::main_with_args(std::env::args_os()));
}
