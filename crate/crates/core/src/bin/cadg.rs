fn main() {
    std::process::exit(cadg::cli::run(std::env::args_os()));
}
