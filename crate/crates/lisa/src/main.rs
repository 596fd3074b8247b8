fn main() {
    std::process::exit(lisa::cli::run());
}
