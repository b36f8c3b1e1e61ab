fn main() {
    std::process::exit(stepflow_cli::run(std::env::args()));
}
