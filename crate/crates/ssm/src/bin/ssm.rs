fn main() {
    std::process::exit(ssm::cli::run(std::env::args_os()));
}
