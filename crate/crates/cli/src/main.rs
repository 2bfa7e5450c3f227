fn main() {
    std::process::exit(bpmap_cli::run(std::env::args()));
}
