fn main() {
    std::process::exit(predcal::cli::run_from_args(std::env::args_os()));
}
