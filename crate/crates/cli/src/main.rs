fn main() {
    std::process::exit(socnet_cli::run_from_args(std::env::args_os()));
}
