fn main() {
    std::process::exit(rankcf::cli::main_with_args(std::env::args_os()));
}
