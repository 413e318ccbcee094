fn main() {
    std::process::exit(tokfuse::cli::run(std::env::args_os()));
}
