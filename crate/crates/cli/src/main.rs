fn main() {
    std::process::exit(codecalign_cli::run(std::env::args_os()));
}
