fn main() {
    std::process::exit(wlq::cli::run());
}
