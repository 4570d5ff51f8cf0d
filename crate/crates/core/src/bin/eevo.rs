fn main() {
    std::process::exit(eevo::cli::run(std::env::args_os()));
}
