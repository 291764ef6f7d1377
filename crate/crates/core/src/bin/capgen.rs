fn main() {
    std::process::exit(capgen::cli::main_with_args(std::env::args_os(), |k| std::env::var(k).ok()));
}
