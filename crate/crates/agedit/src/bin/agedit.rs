fn main() {
    std::process::exit(agedit::cli::run(std::env::args_os()));
}
