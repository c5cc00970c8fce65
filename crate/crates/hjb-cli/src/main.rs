fn main() {
    std::process::exit(hjb_cli::run_cli());
}
