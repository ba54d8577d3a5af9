fn main() {
    std::process::exit(ttac::cli::cli_main(std::env::args_os()));
}
