fn main() {
    std::process::exit(coldselect_cli::run(std::env::args_os()));
}
