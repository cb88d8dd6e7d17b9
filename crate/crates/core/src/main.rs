fn main() {
    std::process::exit(relmine::cli::run(std::env::args_os()));
}
