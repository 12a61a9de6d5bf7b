fn main() {
    std::process::exit(mtrep::cli::run(std::env::args_os()));
}
