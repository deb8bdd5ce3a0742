fn main() {
    std::process::exit(sesame_harness::cli::run(std::env::args_os()));
}
