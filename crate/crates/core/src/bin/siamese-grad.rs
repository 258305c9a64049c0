fn main() {
    std::process::exit(siamese_grad::cli::run(std::env::args_os()));
}
