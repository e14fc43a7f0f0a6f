fn main() {
    std::process::exit(shotlab::cli::main_with_args(std::env::args_os()));
}
