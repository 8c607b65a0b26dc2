fn main() {
    std::process::exit(midframe::cli_main());
}
