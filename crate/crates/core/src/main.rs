fn main() {
    std::process::exit(hner::cli::run_cli(std::env::args_os()));
}
