fn main() {
    std::process::exit(copyforge::cli::run(std::env::args_os()));
}
