fn main() {
    std::process::exit(policyscope_cli::run(std::env::args_os()));
}
