fn main() {
    std::process::exit(hoikit::cli::run(std::env::args_os()));
}
