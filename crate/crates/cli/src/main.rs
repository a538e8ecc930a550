fn main() {
    std::process::exit(homoscale_cli::main_with_args(std::env::args_os()));
}
