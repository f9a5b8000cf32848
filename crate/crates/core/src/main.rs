fn main() {
    std::process::exit(law_core::cli::run(std::env::args_os()));
}
