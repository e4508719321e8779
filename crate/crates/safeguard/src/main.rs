fn main() {
    std::process::exit(safeguard::cli::run(std::env::args_os()));
}
