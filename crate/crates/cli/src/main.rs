fn main() {
    std::process::exit(semisel_cli::run(std::env::args_os()));
}
