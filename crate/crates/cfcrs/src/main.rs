fn main() {
    std::process::exit(cfcrs::cli::main_with_args(std::env::args_os()));
}
