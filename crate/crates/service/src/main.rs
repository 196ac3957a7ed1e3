fn main() {
    std::process::exit(cityflow_service::cli::run(std::env::args()));
}
