fn main() {
    std::process::exit(hyena_distill::cli::run(std::env::args_os()));
}
