fn main() {
    std::process::exit(segbench::cli::run(std::env::args_os()));
}
