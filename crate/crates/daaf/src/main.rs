fn main() {
    std::process::exit(daaf::cli::run(std::env::args_os()));
}
