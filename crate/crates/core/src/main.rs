fn main() {
    std::process::exit(warpcore::cli::run(std::env::args_os()));
}
