fn main() {
    std::process::exit(cloudann::cli::run(std::env::args_os()));
}
