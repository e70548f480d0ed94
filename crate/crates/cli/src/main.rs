fn main() {
    std::process::exit(surgphase_cli::run(std::env::args_os()));
}
