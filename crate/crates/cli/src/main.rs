fn main() {
    std::process::exit(dendrite_cli::run(std::env::args_os()));
}
