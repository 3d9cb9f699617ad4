fn main() {
    std::process::exit(recant_cli::run(std::env::args_os()));
}
