fn main() {
    std::process::exit(humanlike::cli::run(std::env::args_os()));
}
