fn main() {
    std::process::exit(gmn_cli::run(std::env::args_os()));
}
