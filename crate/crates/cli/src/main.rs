fn main() {
    std::process::exit(pperf::cli::main_with_args(std::env::args_os()));
}
