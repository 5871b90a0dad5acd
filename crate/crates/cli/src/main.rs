fn main() {
    std::process::exit(pensemble_cli::cli_main(std::env::args_os()));
}
