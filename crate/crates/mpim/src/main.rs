fn main() {
    std::process::exit(mpim::run());
}
