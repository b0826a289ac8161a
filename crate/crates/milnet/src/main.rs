fn main() {
    std::process::exit(milnet::cli::run());
}
