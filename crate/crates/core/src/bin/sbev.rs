fn main() {
    std::process::exit(sbev_core::cli::main_with_args(std::env::args_os()));
}
