fn main() {
    std::process::exit(suffixlab_cli::run(std::env::args_os()));
}
