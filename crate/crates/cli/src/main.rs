fn main() {
    std::process::exit(gifnet_cli::run(std::env::args_os()));
}
