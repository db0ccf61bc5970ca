fn main() {
    std::process::exit(sympie_cli::run(std::env::args_os()));
}
