fn main() {
    std::process::exit(srus_cli::run(std::env::args_os()));
}
