fn main() {
    std::process::exit(cowork_cli::main_with_args(std::env::args_os()));
}
