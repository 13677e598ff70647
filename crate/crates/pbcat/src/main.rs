fn main() {
    std::process::exit(pbcat::cli::run(std::env::args_os()));
}
