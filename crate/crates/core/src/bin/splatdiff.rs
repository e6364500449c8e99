fn main() {
    std::process::exit(splatdiff::cli::run(std::env::args_os()));
}
