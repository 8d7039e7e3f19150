fn main() {
    std::process::exit(ltto::cli::run(std::env::args_os()));
}
