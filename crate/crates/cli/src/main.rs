fn main() {
    std::process::exit(csa_cli::run(std::env::args_os()));
}
