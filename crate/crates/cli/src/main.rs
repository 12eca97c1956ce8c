fn main() {
    std::process::exit(efft_cli::run(std::env::args_os()));
}
