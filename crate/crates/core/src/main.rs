fn main() {
    std::process::exit(physmeas::cli::main_with_args(std::env::args_os()));
}
