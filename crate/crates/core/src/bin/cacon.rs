fn main() {
    std::process::exit(cacon::cli::cli_dispatch(std::env::args_os()));
}
