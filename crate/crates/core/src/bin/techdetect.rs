fn main() {
    std::process::exit(techdetect::cli::run(std::env::args_os()));
}
