fn main() {
    std::process::exit(insectfm::cli::run(std::env::args_os()));
}
