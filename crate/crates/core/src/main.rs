fn main() {
    std::process::exit(convzoo::cli::run(std::env::args_os()));
}
