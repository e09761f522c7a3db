fn main() {
    std::process::exit(sdistill::cli::run(std::env::args_os()));
}
