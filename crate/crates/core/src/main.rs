fn main() {
    std::process::exit(morphbench::cli::run(std::env::args_os()));
}
