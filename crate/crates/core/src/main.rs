fn main() {
    std::process::exit(drlyap::cli::run());
}
