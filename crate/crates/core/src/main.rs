fn main() {
    std::process::exit(ppe::cli::cli_main(std::env::args_os()));
}
