fn main() {
    std::process::exit(tata::cli::run(std::env::args_os()));
}
