fn main() {
    std::process::exit(dyncom::cli::run_cli());
}
