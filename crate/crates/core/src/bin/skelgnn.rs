fn main() {
    std::process::exit(skelgnn::cli::run(std::env::args_os()));
}
