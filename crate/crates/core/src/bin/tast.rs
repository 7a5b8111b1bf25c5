fn main() {
    std::process::exit(tast_core::cli::run_cli(std::env::args_os()));
}
