fn main() {
    std::process::exit(multibox::cli::run());
}
