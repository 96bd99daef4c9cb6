fn main() {
    std::process::exit(fbbounds_cli::run(std::env::args_os()));
}
