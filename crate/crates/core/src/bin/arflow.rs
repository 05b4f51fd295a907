fn main() {
    std::process::exit(arflow::cli::run(std::env::args_os()));
}
