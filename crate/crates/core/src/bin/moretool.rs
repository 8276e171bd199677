fn main() {
    std::process::exit(moretool::cli::run(std::env::args_os()));
}
