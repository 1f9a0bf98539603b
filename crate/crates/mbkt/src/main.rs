fn main() {
    std::process::exit(mbkt::cli::run(std::env::args_os()));
}
