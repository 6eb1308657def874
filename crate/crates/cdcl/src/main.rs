fn main() {
    std::process::exit(cdcl::cli::run(std::env::args_os()));
}
