fn main() {
    std::process::exit(remoe::cli::run());
}
