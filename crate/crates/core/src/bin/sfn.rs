fn main() {
    std::process::exit(sfn_core::cli::run(std::env::args_os()));
}
