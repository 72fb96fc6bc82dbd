fn main() {
    std::process::exit(lawcat_cli::cli_dispatch(std::env::args_os()));
}
