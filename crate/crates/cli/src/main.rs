fn main() {
    std::process::exit(wcaps_cli::run(std::env::args_os()));
}
