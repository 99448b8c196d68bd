fn main() {
    std::process::exit(stflow_cli::run(std::env::args_os()));
}
