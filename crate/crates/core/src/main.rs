fn main() {
    std::process::exit(fsda_core::cli::run(std::env::args_os()));
}
