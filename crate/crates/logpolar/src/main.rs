fn main() {
    std::process::exit(logpolar::run::cli_main(std::env::args_os()));
}
