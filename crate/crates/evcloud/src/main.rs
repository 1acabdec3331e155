fn main() {
    std::process::exit(evcloud::cli::run());
}
