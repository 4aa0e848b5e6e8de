fn main() {
    std::process::exit(aqe_cli::run(std::env::args_os()));
}
