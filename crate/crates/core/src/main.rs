fn main() {
    std::process::exit(glpnet::cli::run(std::env::args_os()));
}
