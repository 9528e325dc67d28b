fn main() {
    std::process::exit(loopgas::cli::run(std::env::args()));
}
