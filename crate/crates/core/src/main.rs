fn main() {
    std::process::exit(storyvis::cli::run(std::env::args_os()));
}
