fn main() {
    std::process::exit(spanedit_cli::run(std::env::args_os()));
}
