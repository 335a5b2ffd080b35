fn main() {
    std::process::exit(aerocon::cli::run(std::env::args_os()));
}
