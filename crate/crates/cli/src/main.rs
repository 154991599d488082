fn main() {
    std::process::exit(smoothlearn_cli::run(std::env::args_os()));
}
