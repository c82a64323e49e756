fn main() {
    std::process::exit(sce_cli::run_cli(std::env::args_os()));
}
