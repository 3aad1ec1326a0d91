fn main() {
    std::process::exit(deconoise_core::cli::run(std::env::args_os()));
}
