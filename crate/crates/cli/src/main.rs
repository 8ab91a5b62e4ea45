fn main() {
    std::process::exit(caire_cli::run(std::env::args()));
}
