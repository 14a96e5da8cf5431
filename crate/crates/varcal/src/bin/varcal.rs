fn main() {
    std::process::exit(varcal::cli::main_with_args(std::env::args_os()));
}
