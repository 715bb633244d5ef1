fn main() {
    std::process::exit(odfsep_cli::run(std::env::args_os()));
}
