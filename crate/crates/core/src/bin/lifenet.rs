fn main() {
    std::process::exit(lifenet::cli::run(std::env::args_os()));
}
