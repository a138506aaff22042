fn main() {
    std::process::exit(mta::run_cli());
}
