fn main() {
    std::process::exit(laco_kit::cli::main_with_args(std::env::args_os()));
}
