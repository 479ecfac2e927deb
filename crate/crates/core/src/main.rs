fn main() {
    std::process::exit(brainrgin::cli::run(std::env::args_os()));
}
