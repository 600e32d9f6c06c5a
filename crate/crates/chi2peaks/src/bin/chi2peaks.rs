fn main() {
    std::process::exit(chi2peaks::cli::run(std::env::args_os()));
}
