fn main() {
    std::process::exit(cmis::harness::cli::run(std::env::args_os()));
}
