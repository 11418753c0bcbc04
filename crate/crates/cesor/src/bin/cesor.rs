fn main() {
    std::process::exit(cesor::cli::run_from_args());
}
