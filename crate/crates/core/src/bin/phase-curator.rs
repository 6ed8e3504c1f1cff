fn main() {
    std::process::exit(phase_curator::pipeline::cli::run(std::env::args_os()));
}
