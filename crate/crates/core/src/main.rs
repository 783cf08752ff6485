fn main() {
    std::process::exit(conv_tickets::cli::run_from(std::env::args_os()));
}
