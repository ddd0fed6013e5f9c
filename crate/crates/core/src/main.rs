fn main() {
    let seed = std::env::var(curvforge::cli::SEED_ENV).ok();
    std::process::exit(curvforge::cli::run(std::env::args_os(), seed.as_deref()));
}
