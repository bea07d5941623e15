fn main() {
    std::process::exit(promptlab_cli::cli_main(std::env::args_os()));
}
