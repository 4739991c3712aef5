fn main() {
    std::process::exit(holi::cli::main_with_args(std::env::args_os()));
}
