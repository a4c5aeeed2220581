fn main() {
    std::process::exit(afex::cli::run(std::env::args_os()));
}
