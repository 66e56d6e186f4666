fn main() {
    std::process::exit(unibe::cli::run_cli(std::env::args_os()));
}
