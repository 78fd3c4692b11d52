fn main() {
    std::process::exit(ssmcovest::cli::cli_main(std::env::args_os()));
}
