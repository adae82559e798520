fn main() {
    std::process::exit(smoothps_cli::run(std::env::args_os()));
}
