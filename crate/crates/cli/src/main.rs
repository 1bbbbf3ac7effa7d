fn main() {
    std::process::exit(qtherm_cli::run(std::env::args_os()));
}
