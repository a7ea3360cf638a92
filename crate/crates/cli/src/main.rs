fn main() {
    std::process::exit(trupnet_cli::run(std::env::args_os()));
}
