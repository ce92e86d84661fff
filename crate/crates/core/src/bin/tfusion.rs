fn main() {
    std::process::exit(tfusion::cli::run(std::env::args_os()));
}
