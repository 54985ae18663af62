fn main() {
    std::process::exit(geoaware_cli::run(std::env::args_os()));
}
