fn main() {
    std::process::exit(vdgae_cli::run(std::env::args_os()));
}
