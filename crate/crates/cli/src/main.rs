fn main() {
    std::process::exit(smart_cli::run(std::env::args_os()));
}
